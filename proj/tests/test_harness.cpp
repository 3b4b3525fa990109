#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace tslod;

namespace {

harness::ExperimentConfig tiny_config() {
  harness::ExperimentConfig cfg;
  cfg.problem = "tc1_analog";
  cfg.n_h = 32;
  cfg.coarse = {4};
  cfg.eps1 = 1e-3;
  cfg.eps2 = 5e-2;
  cfg.n_train = 8;
  cfg.n_validate = 3;
  cfg.seed = 424242;
  cfg.outdir = "out_harness_test";
  cfg.save_models = true;
  cfg.zero_weight_diagnostic = true;
  cfg.timing_samples = 2;
  cfg.lod_reps = 1;
  return cfg;
}

const harness::ExperimentResult& tiny_run() {
  static harness::ExperimentResult res = [] {
    std::filesystem::remove_all("out_harness_test");
    harness::ExperimentResult r = harness::run_experiment(tiny_config());
    harness::write_outputs(r);
    return r;
  }();
  return res;
}

}  // namespace

TEST_CASE("config serialization round-trips every field") {
  harness::ExperimentConfig c;
  c.problem = "thermal_block";
  c.n_h = 128;
  c.coarse = {4, 8};
  c.eps1 = 3e-4;
  c.eps2 = 2e-2;
  c.n_train = 17;
  c.n_validate = 4;
  c.seed = 99;
  c.oversampling = 2;
  c.outdir = "elsewhere";
  c.save_models = false;
  c.zero_weight_diagnostic = true;
  c.workers = 2;
  c.timing_samples = 7;
  c.lod_reps = 2;
  c.s1_max_iter = 55;
  c.s2_max_iter = 66;

  const harness::ExperimentConfig b =
      harness::config_from_json(harness::config_to_json(c));
  REQUIRE(b.problem == c.problem);
  REQUIRE(b.n_h == c.n_h);
  REQUIRE(b.coarse == c.coarse);
  REQUIRE(b.eps1 == c.eps1);
  REQUIRE(b.eps2 == c.eps2);
  REQUIRE(b.n_train == c.n_train);
  REQUIRE(b.n_validate == c.n_validate);
  REQUIRE(b.seed == c.seed);
  REQUIRE(b.oversampling == c.oversampling);
  REQUIRE(b.outdir == c.outdir);
  REQUIRE(b.save_models == c.save_models);
  REQUIRE(b.zero_weight_diagnostic == c.zero_weight_diagnostic);
  REQUIRE(b.workers == c.workers);
  REQUIRE(b.timing_samples == c.timing_samples);
  REQUIRE(b.lod_reps == c.lod_reps);
  REQUIRE(b.s1_max_iter == c.s1_max_iter);
  REQUIRE(b.s2_max_iter == c.s2_max_iter);

  // Absent keys fall back to defaults.
  const harness::ExperimentConfig d =
      harness::config_from_json(nlohmann::json::object());
  REQUIRE(d.problem == "tc1_analog");
  REQUIRE(d.coarse == std::vector<int>{8, 16, 32});
}

TEST_CASE("oversampling follows the rule unless overridden") {
  harness::ExperimentConfig cfg;
  cfg.n_h = 64;
  REQUIRE(harness::pick_oversampling(cfg, 8) ==
          grid::choose_oversampling(1.0 / 8));
  cfg.oversampling = 1;
  REQUIRE(harness::pick_oversampling(cfg, 8) == 1);
}

TEST_CASE("tiny experiment produces coherent results and certificates") {
  const auto& res = tiny_run();
  REQUIRE(res.cases.size() == 1);
  const auto& cr = res.cases[0];

  REQUIRE(cr.n_H == 4);
  REQUIRE(cr.rho > 0);
  REQUIRE_FALSE(cr.stalled);
  REQUIRE(static_cast<int>(cr.rows.size()) == 3);
  REQUIRE(static_cast<int>(cr.s1_stats.size()) == 16);

  long cum = 0;
  for (const auto& s : cr.s1_stats) {
    REQUIRE(s.N >= 0);
    REQUIRE(s.seconds >= 0);
    cum += s.N;
  }
  REQUIRE(cum == cr.cum_size_s1);
  REQUIRE(cr.av_size_s1 == Catch::Approx(double(cum) / 16.0));
  REQUIRE(cr.size_s2 >= 1);

  for (const auto& r : cr.rows) {
    REQUIRE(r.l2_fem_lod > 0);
    REQUIRE(r.l2_fem_ts > 0);
    REQUIRE(r.res_norm >= 0);
    REQUIRE(r.true_energy >= 0);
    // Certification: the exact-constant bound covers the true energy error.
    REQUIRE(r.eta_a_exact >= r.true_energy * (1.0 - 1e-9));
    REQUIRE(r.t_ts > 0);
    REQUIRE(r.t_rblod > 0);
    REQUIRE(r.t_lod > 0);
  }
  REQUIRE(cr.min_margin >= -1e-10 * std::max(cr.max_eta_exact, 1e-300));

  REQUIRE(cr.t.stage1_total > 0);
  REQUIRE(cr.t.stage2 > 0);
  REQUIRE(cr.t.t_ts_avg > 0);

  // Diagnostic model trained and traced.
  REQUIRE(cr.zero_weight_final_eta >= 0);
  REQUIRE_FALSE(cr.s2_zero_trace.empty());
}

TEST_CASE("output files exist and parse") {
  tiny_run();
  namespace fs = std::filesystem;
  const fs::path out("out_harness_test");

  REQUIRE(fs::exists(out / "report.json"));
  std::ifstream is(out / "report.json");
  nlohmann::json j = nlohmann::json::parse(is);
  REQUIRE(j.at("config").at("n_h") == 32);
  REQUIRE(j.at("cases").size() == 1);
  REQUIRE(j.at("cases").at(0).at("n_H") == 4);
  REQUIRE(j.at("cases").at(0).at("rows").size() == 3);

  std::ifstream tis(out / "tables.csv");
  std::string header;
  std::getline(tis, header);
  REQUIRE(header == "method,n_H,metric,value");
  std::string rest((std::istreambuf_iterator<char>(tis)),
                   std::istreambuf_iterator<char>());
  REQUIRE(rest.find("tsrblod") != std::string::npos);
  REQUIRE(rest.find("rblod") != std::string::npos);
  REQUIRE(rest.find("lod") != std::string::npos);

  std::ifstream gis(out / "greedy_trace.csv");
  std::getline(gis, header);
  REQUIRE(header == "stage,n_H,element,iter,eta,param_index,hat_index,accepted");

  REQUIRE(fs::exists(out / "models_nH4" / "rom_T0.bin"));
  REQUIRE(fs::exists(out / "models_nH4" / "rom2.json"));
  REQUIRE(fs::exists(out / "models_nH4" / "offline.json"));
}

TEST_CASE("validation from saved models reproduces the experiment") {
  const auto& first = tiny_run();
  const auto second = harness::run_validate(tiny_config());
  REQUIRE(second.cases.size() == 1);
  const auto& a = first.cases[0];
  const auto& b = second.cases[0];

  REQUIRE(a.cum_size_s1 == b.cum_size_s1);
  REQUIRE(a.size_s2 == b.size_s2);
  REQUIRE(a.k == b.k);
  REQUIRE(a.rho == Catch::Approx(b.rho).epsilon(1e-14));

  auto close = [](double x, double y) {
    return std::abs(x - y) <= 1e-12 * std::max({std::abs(x), std::abs(y), 1e-30});
  };
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    REQUIRE(close(a.rows[i].h1_lod_ts, b.rows[i].h1_lod_ts));
    REQUIRE(close(a.rows[i].l2_lod_ts, b.rows[i].l2_lod_ts));
    REQUIRE(close(a.rows[i].l2_fem_ts, b.rows[i].l2_fem_ts));
    REQUIRE(close(a.rows[i].l2_fem_lod, b.rows[i].l2_fem_lod));
    REQUIRE(close(a.rows[i].res_norm, b.rows[i].res_norm));
    REQUIRE(close(a.rows[i].eta_a_exact, b.rows[i].eta_a_exact));
    REQUIRE(close(a.rows[i].true_energy, b.rows[i].true_energy));
  }
  REQUIRE(close(a.e_h1_lod_ts, b.e_h1_lod_ts));
  REQUIRE(close(a.e_l2_fem_ts, b.e_l2_fem_ts));
  REQUIRE(close(a.min_margin, b.min_margin));
}
