// Command line front end: full experiment runs plus an offline/validate split
// so trained models can be reused across invocations.

#include <tslod/harness.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <string>

namespace {

void print_summary(const tslod::harness::ExperimentResult& res) {
  for (const auto& cr : res.cases) {
    std::printf("case n_H=%d k=%d rho=%.3g: stage1 %.1fs (avg N %.2f, cum %ld), "
                "stage2 %.1fs (N %d)%s\n",
                cr.n_H, cr.k, cr.rho, cr.t.stage1_total, cr.av_size_s1,
                cr.cum_size_s1, cr.t.stage2, cr.size_s2,
                cr.stalled ? " [stalled]" : "");
    if (!cr.rows.empty())
      std::printf("  errors: h1_lod_ts %.3e l2_fem_ts %.3e l2_fem_lod %.3e | "
                  "times: lod %.3gs rblod %.3gs ts %.3gs | effectivity <= %.2f\n",
                  cr.e_h1_lod_ts, cr.e_l2_fem_ts, cr.e_l2_fem_lod,
                  cr.t.t_lod_avg, cr.t.t_rblod_avg, cr.t.t_ts_avg,
                  cr.max_effectivity);
  }
  std::printf("total %.1fs (fem references %.1fs)\n", res.total_seconds,
              res.fem_seconds);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage reduced basis solver for parameterized multiscale "
               "diffusion"};
  app.require_subcommand(1);

  std::string config_path;
  std::string outdir_override;
  std::uint64_t seed_override = 0;
  bool no_save = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON experiment config")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("-o,--outdir", outdir_override, "override output directory");
    sub->add_option("--seed", seed_override, "override RNG seed");
  };

  CLI::App* run = app.add_subcommand("run", "train and validate in one pass");
  add_common(run);
  run->add_flag("--no-save-models", no_save, "skip writing model files");
  CLI::App* offline = app.add_subcommand("offline", "train and save models");
  add_common(offline);
  CLI::App* validate =
      app.add_subcommand("validate", "validate previously saved models");
  add_common(validate);

  CLI11_PARSE(app, argc, argv);

  try {
    tslod::harness::ExperimentConfig cfg = tslod::harness::load_config(config_path);
    if (!outdir_override.empty()) cfg.outdir = outdir_override;
    if (seed_override != 0) cfg.seed = seed_override;
    if (no_save) cfg.save_models = false;

    tslod::harness::ExperimentResult res;
    if (app.got_subcommand(run)) {
      res = tslod::harness::run_experiment(cfg);
      tslod::harness::write_outputs(res);
    } else if (app.got_subcommand(offline)) {
      res = tslod::harness::run_offline(cfg);
    } else {
      res = tslod::harness::run_validate(cfg);
      tslod::harness::write_outputs(res);
    }
    print_summary(res);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 0;
}
