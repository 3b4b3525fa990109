#pragma once

// Experiment harness: trains both reduction stages on a parameterized
// multiscale problem, validates against the localized multiscale reference
// and a fine Galerkin reference, and writes machine-readable reports.
// Validation streams the patch problems in two sweeps so at most one factored
// patch system is alive at a time.

#include <tslod/stage2.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

namespace tslod::harness {

struct ExperimentConfig {
  std::string problem = "tc1_analog";
  int n_h = 256;
  std::vector<int> coarse = {8, 16, 32};
  double eps1 = 1e-3;
  double eps2 = 1e-2;
  int n_train = 50;
  int n_validate = 10;
  std::uint64_t seed = 170915;
  int oversampling = 0;  // 0 picks k from H by the default rule
  std::string outdir = "out";
  bool save_models = true;
  bool zero_weight_diagnostic = false;  // also train a zero fine-weight model
  int workers = 1;
  int timing_samples = 5;
  int lod_reps = 3;
  int s1_max_iter = 200;
  int s2_max_iter = 200;
};

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.problem = j.value("problem", c.problem);
  c.n_h = j.value("n_h", c.n_h);
  if (j.contains("coarse")) c.coarse = j.at("coarse").get<std::vector<int>>();
  c.eps1 = j.value("eps1", c.eps1);
  c.eps2 = j.value("eps2", c.eps2);
  c.n_train = j.value("n_train", c.n_train);
  c.n_validate = j.value("n_validate", c.n_validate);
  c.seed = j.value("seed", c.seed);
  c.oversampling = j.value("oversampling", c.oversampling);
  c.outdir = j.value("outdir", c.outdir);
  c.save_models = j.value("save_models", c.save_models);
  c.zero_weight_diagnostic =
      j.value("zero_weight_diagnostic", c.zero_weight_diagnostic);
  c.workers = j.value("workers", c.workers);
  c.timing_samples = j.value("timing_samples", c.timing_samples);
  c.lod_reps = j.value("lod_reps", c.lod_reps);
  c.s1_max_iter = j.value("s1_max_iter", c.s1_max_iter);
  c.s2_max_iter = j.value("s2_max_iter", c.s2_max_iter);
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["problem"] = c.problem;
  j["n_h"] = c.n_h;
  j["coarse"] = c.coarse;
  j["eps1"] = c.eps1;
  j["eps2"] = c.eps2;
  j["n_train"] = c.n_train;
  j["n_validate"] = c.n_validate;
  j["seed"] = c.seed;
  j["oversampling"] = c.oversampling;
  j["outdir"] = c.outdir;
  j["save_models"] = c.save_models;
  j["zero_weight_diagnostic"] = c.zero_weight_diagnostic;
  j["workers"] = c.workers;
  j["timing_samples"] = c.timing_samples;
  j["lod_reps"] = c.lod_reps;
  j["s1_max_iter"] = c.s1_max_iter;
  j["s2_max_iter"] = c.s2_max_iter;
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config '" + path + "'");
  nlohmann::json j;
  is >> j;
  return config_from_json(j);
}

struct ElementStat {
  int element = 0;
  int N = 0;
  int M = 0;
  int iters = 0;
  double seconds = 0;
};

struct ValidationRow {
  int param_index = 0;
  Vector mu;
  double alpha_mu = 0, kappa_mu = 0;
  // coarse-part errors against the localized multiscale reference, relative
  double h1_lod_ts = 0, l2_lod_ts = 0;
  double h1_lod_rb = 0, l2_lod_rb = 0;
  // fine reconstruction errors against the Galerkin reference, relative L2
  double l2_fem_ts = 0, l2_fem_rb = 0, l2_fem_lod = 0;
  // estimator values; the _exact variants use per-parameter constants
  double res_norm = 0, eta_a = 0, eta_1 = 0;
  double eta_a_exact = 0;
  double true_energy = 0;  // energy norm of the two-scale error, exact
  double effectivity = 0;  // eta_a_exact / true_energy
  double t_lod = 0, t_rblod = 0, t_ts = 0;
};

struct CaseTimings {
  double stage1_total = 0, stage1_avg = 0, stage2 = 0, offline = 0;
  double t_lod_avg = 0, t_rblod_avg = 0, t_ts_avg = 0;
};

struct CaseResult {
  int n_H = 0, k = 0;
  double rho = 0, gamma_k = 0;
  coeff::SpectralBounds bounds;  // over the training and validation sets
  long cum_size_s1 = 0;
  double av_size_s1 = 0;
  int size_s2 = 0, m2 = 0;
  bool stalled = false;
  double zero_weight_final_eta = -1;  // diagnostic model, when trained
  std::vector<ElementStat> s1_stats;
  std::vector<std::vector<stage1::TraceRow>> s1_traces;  // per element
  std::vector<stage2::TraceRow> s2_trace;
  std::vector<stage2::TraceRow> s2_zero_trace;
  std::vector<ValidationRow> rows;
  CaseTimings t;
  // maxima over the validation set
  double e_h1_lod_ts = 0, e_l2_lod_ts = 0;
  double e_h1_lod_rb = 0, e_l2_lod_rb = 0;
  double e_l2_fem_ts = 0, e_l2_fem_rb = 0, e_l2_fem_lod = 0;
  double max_eta_exact = 0, max_true_energy = 0, max_effectivity = 0;
  double min_margin = 0;  // min over the set of eta_a_exact - true_energy
};

struct ExperimentResult {
  ExperimentConfig cfg;
  std::vector<Vector> train_params, validate_params;
  std::vector<CaseResult> cases;
  double fem_seconds = 0;
  double total_seconds = 0;
};

struct CaseModels {
  std::vector<stage1::CorrectorROM> roms;
  stage2::TwoScaleROM rom2;
};

// Fine Galerkin references for the validation set; independent of the coarse
// mesh, so one computation serves every case on the same coefficient.
struct FineRefs {
  std::vector<Vector> u;
  std::vector<double> l2;
  double seconds = 0;
};

inline FineRefs compute_fine_refs(const fem::Workspace& ws,
                                  const coeff::SeparableCoefficient& c,
                                  const std::vector<Vector>& params) {
  FineRefs refs;
  const double t0 = wall_time();
  for (const Vector& mu : params) {
    refs.u.push_back(fem::fem_reference_solve(ws, c, mu));
    refs.l2.push_back(fem::l2_norm(ws, refs.u.back()));
  }
  refs.seconds = wall_time() - t0;
  return refs;
}

namespace detail {

inline double coarse_h1(const fem::Workspace& ws, const Vector& v) {
  return std::sqrt(std::max(0.0, v.dot(ws.S_coarse * v) + v.dot(ws.M_coarse * v)));
}

inline double rel(double err, double ref) {
  return err / std::max(ref, 1e-300);
}

// Median over samples of the per-call time; the body is repeated until one
// sample spans min_span so sub-millisecond solves are measurable.
inline double median_call_time(const std::function<void()>& fn, int samples,
                               double min_span = 5e-3) {
  long reps = 1;
  for (;;) {
    const double t0 = wall_time();
    for (long r = 0; r < reps; ++r) fn();
    const double dt = wall_time() - t0;
    if (dt >= min_span || reps >= (1L << 22)) break;
    const double scale = min_span * 1.3 / std::max(dt, 1e-9);
    reps = std::min<long>(1L << 22, std::max(reps + 1, static_cast<long>(reps * scale)));
  }
  std::vector<double> xs(std::max(1, samples));
  for (auto& x : xs) {
    const double t0 = wall_time();
    for (long r = 0; r < reps; ++r) fn();
    x = (wall_time() - t0) / static_cast<double>(reps);
  }
  return median(xs);
}

}  // namespace detail

inline int pick_oversampling(const ExperimentConfig& cfg, int n_H) {
  return cfg.oversampling > 0 ? cfg.oversampling
                              : grid::choose_oversampling(1.0 / n_H);
}

// Offline phase for one coarse mesh: per-element corrector reduction, then
// the coupled second-stage reduction. Fills the size and timing fields.
inline CaseResult train_case(const coeff::Problem& problem,
                             const ExperimentConfig& cfg, int n_H,
                             const std::vector<Vector>& train,
                             const std::vector<Vector>& validate,
                             CaseModels& models) {
  CaseResult cr;
  cr.n_H = n_H;
  cr.k = pick_oversampling(cfg, n_H);

  grid::MeshHierarchy mesh(cfg.n_h, n_H);
  fem::Workspace ws = fem::make_workspace(mesh);
  interp::InterpolationOperator ih = interp::make_interpolation(mesh);

  std::vector<Vector> all = train;
  all.insert(all.end(), validate.begin(), validate.end());
  cr.bounds = coeff::estimate_spectral_bounds(problem.coefficient, all);
  cr.rho = lod::rho_default(cr.k, cr.bounds.kappa);
  cr.gamma_k = std::sqrt(cr.bounds.alpha);

  stage1::Stage1Options o1;
  o1.eps1 = cfg.eps1;
  o1.max_iter = cfg.s1_max_iter;
  o1.retain_basis = true;
  o1.alpha = cr.bounds.alpha;
  o1.kappa = cr.bounds.kappa;

  const int n_el = mesh.coarse_elements();
  models.roms.resize(n_el);
  cr.s1_stats.resize(n_el);
  cr.s1_traces.resize(n_el);
  for (int e = 0; e < n_el; ++e) {
    const double t0 = wall_time();
    stage1::TrainResult tr =
        stage1::train_corrector_rom(ws, ih, problem.coefficient, e, cr.k, train, o1);
    const double dt = wall_time() - t0;
    cr.s1_stats[e] = {e, tr.rom.N(), tr.rom.M(),
                      static_cast<int>(tr.trace.size()), dt};
    cr.s1_traces[e] = std::move(tr.trace);
    models.roms[e] = std::move(tr.rom);
    cr.cum_size_s1 += cr.s1_stats[e].N;
    cr.t.stage1_total += dt;
  }
  cr.av_size_s1 = static_cast<double>(cr.cum_size_s1) / n_el;
  cr.t.stage1_avg = cr.t.stage1_total / n_el;

  stage2::Stage2Options o2;
  o2.eps2 = cfg.eps2;
  o2.max_iter = cfg.s2_max_iter;
  o2.rho = cr.rho;
  o2.gamma_k = cr.gamma_k;
  o2.alpha = cr.bounds.alpha;
  o2.kappa = cr.bounds.kappa;
  {
    const double t0 = wall_time();
    stage2::Stage2TrainResult s2 =
        stage2::train_two_scale_rom(models.roms, ws, train, cr.k, o2);
    cr.t.stage2 = wall_time() - t0;
    cr.s2_trace = std::move(s2.trace);
    cr.stalled = s2.stalled;
    models.rom2 = std::move(s2.rom);
    cr.size_s2 = models.rom2.N2();
    cr.m2 = models.rom2.M2();
  }
  cr.t.offline = cr.t.stage1_total + cr.t.stage2;

  if (cfg.zero_weight_diagnostic) {
    stage2::Stage2Options oz = o2;
    oz.rho = 0.0;
    stage2::Stage2TrainResult sz =
        stage2::train_two_scale_rom(models.roms, ws, train, cr.k, oz);
    cr.s2_zero_trace = std::move(sz.trace);
    if (!cr.s2_zero_trace.empty())
      cr.zero_weight_final_eta = cr.s2_zero_trace.back().eta;
  }
  return cr;
}

// Validation phase: two streaming sweeps over the elements. Sweep one builds
// the exact localized stiffness blocks per parameter; after the coarse
// solves, sweep two refactors each patch to measure the true corrector
// defects and finish the fine reference reconstruction.
inline void validate_case(const coeff::Problem& problem,
                          const ExperimentConfig& cfg, const CaseModels& models,
                          const std::vector<Vector>& validate,
                          const FineRefs& refs, CaseResult& cr) {
  const coeff::SeparableCoefficient& c = problem.coefficient;
  grid::MeshHierarchy mesh(cfg.n_h, cr.n_H);
  fem::Workspace ws = fem::make_workspace(mesh);
  interp::InterpolationOperator ih = interp::make_interpolation(mesh);
  const int n_el = mesh.coarse_elements();
  const int n_val = static_cast<int>(validate.size());

  // Sweep one: exact corrector solves, localized stiffness blocks. The hat
  // correctors are spilled to disk so sweep two can apply them to the coarse
  // solutions by linearity instead of refactoring every patch again.
  std::filesystem::create_directories(cfg.outdir);
  const std::filesystem::path spill =
      std::filesystem::path(cfg.outdir) /
      ("corrector_blocks_nH" + std::to_string(cr.n_H) + ".tmp");
  std::vector<std::vector<Matrix>> kblk(n_el, std::vector<Matrix>(n_val));
  std::vector<std::vector<int>> t_nodes(n_el), coupled(n_el);
  std::vector<double> t_lod(n_val, 0.0);
  {
    std::ofstream qs(spill, std::ios::binary | std::ios::trunc);
    if (!qs) throw Error("cannot open spill file '" + spill.string() + "'");
    for (int e = 0; e < n_el; ++e) {
      lod::PatchOperators ops = lod::build_patch_operators(mesh, ih, c, e, cr.k);
      t_nodes[e] = ops.patch.t_nodes;
      coupled[e] = ops.patch.coupled_nodes;
      lod::CorrectorSolver cs(ops);
      for (int vi = 0; vi < n_val; ++vi) {
        const double t0 = wall_time();
        cs.factor(lod::theta_vector(c, validate[vi]));
        Matrix Qc = cs.solve_basis();
        kblk[e][vi] = lod::assemble_K_T(ops, cs, Qc);
        t_lod[vi] += wall_time() - t0;
        qs.write(reinterpret_cast<const char*>(Qc.data()),
                 static_cast<std::streamsize>(sizeof(double) * Qc.size()));
      }
    }
    if (!qs) throw Error("short write to spill file '" + spill.string() + "'");
  }

  std::vector<Vector> u_lod(n_val);
  for (int vi = 0; vi < n_val; ++vi) {
    const double t0 = wall_time();
    std::vector<Triplet> trip;
    for (int e = 0; e < n_el; ++e)
      for (int j = 0; j < static_cast<int>(t_nodes[e].size()); ++j)
        for (int rl = 0; rl < static_cast<int>(coupled[e].size()); ++rl)
          trip.emplace_back(coupled[e][rl], t_nodes[e][j], kblk[e][vi](rl, j));
    SpMat K(mesh.coarse_dofs(), mesh.coarse_dofs());
    K.setFromTriplets(trip.begin(), trip.end());
    u_lod[vi] = lod::solve_coarse_system(K, ws.F_coarse, "localized multiscale system");
    t_lod[vi] += wall_time() - t0;
  }
  kblk.clear();
  kblk.shrink_to_fit();

  // Reduced solves, timed on the same validation set.
  std::vector<stage1::RblodSolution> sol_rb(n_val);
  std::vector<double> t_rblod(n_val, 0.0);
  for (int vi = 0; vi < n_val; ++vi) {
    std::vector<double> samples;
    for (int r = 0; r < std::max(1, cfg.lod_reps); ++r) {
      const double t0 = wall_time();
      sol_rb[vi] = stage1::rblod_solve(models.roms, ws, validate[vi]);
      samples.push_back(wall_time() - t0);
    }
    t_rblod[vi] = median(samples);
  }

  std::vector<stage2::TsSolution> sol_ts(n_val);
  std::vector<double> t_ts(n_val, 0.0);
  for (int vi = 0; vi < n_val; ++vi) {
    const Vector& mu = validate[vi];
    t_ts[vi] = detail::median_call_time(
        [&] { stage2::ts_rom_solve_coeffs(models.rom2, mu); },
        cfg.timing_samples);
    sol_ts[vi] = stage2::ts_rom_solve(models.rom2, mu);
  }

  // Fine reconstructions of the reduced solutions.
  std::vector<Vector> recon_rb(n_val), recon_ts(n_val);
  for (int vi = 0; vi < n_val; ++vi) {
    recon_rb[vi] =
        stage2::reconstruct_solution(models.roms, ws, sol_rb[vi].uH, sol_rb[vi].c);
    recon_ts[vi] =
        stage2::reconstruct_solution(models.roms, ws, sol_ts[vi].uH, sol_ts[vi].f);
  }

  // Sweep two: true correctors of both coarse solutions per element, read
  // back from the spilled hat correctors; the corrector of a coarse function
  // is the hat-corrector block applied to its corner values. The energy error
  // splits into a fine representative part and the weighted corrector defect
  // accumulated here.
  std::vector<Vector> recon_lod(n_val);
  for (int vi = 0; vi < n_val; ++vi) recon_lod[vi] = ws.E * u_lod[vi];
  std::vector<double> defect2(n_val, 0.0);
  {
    std::ifstream qs(spill, std::ios::binary);
    if (!qs) throw Error("cannot reopen spill file '" + spill.string() + "'");
    for (int e = 0; e < n_el; ++e) {
      lod::PatchOperators ops = lod::build_patch_operators(mesh, ih, c, e, cr.k);
      const stage1::CorrectorROM& rom = models.roms[e];
      Matrix Qc(ops.patch.n_free, ops.patch.J_T());
      for (int vi = 0; vi < n_val; ++vi) {
        qs.read(reinterpret_cast<char*>(Qc.data()),
                static_cast<std::streamsize>(sizeof(double) * Qc.size()));
        if (!qs) throw Error("short read from spill file '" + spill.string() + "'");
        const SpMat A_mu = lod::combine_patterned(
            ops.A_free, lod::theta_vector(c, validate[vi]));
        const Vector q_lod =
            Qc * lod::restrict_to_element(ops.patch, u_lod[vi]);
        lod::scatter_add(mesh, ops.patch, q_lod, recon_lod[vi], -1.0);
        const Vector q_ts =
            Qc * lod::restrict_to_element(ops.patch, sol_ts[vi].uH);
        Vector d = q_ts;
        if (rom.N() > 0) d -= rom.zeta * sol_ts[vi].f[e];
        defect2[vi] += cr.rho * d.dot(A_mu * d);
      }
    }
  }
  std::error_code ec;
  std::filesystem::remove(spill, ec);

  cr.rows.assign(n_val, ValidationRow{});
  cr.min_margin = std::numeric_limits<double>::infinity();
  for (int vi = 0; vi < n_val; ++vi) {
    ValidationRow& row = cr.rows[vi];
    row.param_index = vi;
    row.mu = validate[vi];
    const coeff::SpectralBounds bx = coeff::exact_bounds(c, validate[vi]);
    row.alpha_mu = bx.alpha;
    row.kappa_mu = bx.kappa;

    const double ref_h1 = detail::coarse_h1(ws, u_lod[vi]);
    const double ref_l2 = fem::coarse_l2_norm(ws, u_lod[vi]);
    row.h1_lod_ts = detail::rel(
        detail::coarse_h1(ws, Vector(u_lod[vi] - sol_ts[vi].uH)), ref_h1);
    row.l2_lod_ts = detail::rel(
        fem::coarse_l2_norm(ws, Vector(u_lod[vi] - sol_ts[vi].uH)), ref_l2);
    row.h1_lod_rb = detail::rel(
        detail::coarse_h1(ws, Vector(u_lod[vi] - sol_rb[vi].uH)), ref_h1);
    row.l2_lod_rb = detail::rel(
        fem::coarse_l2_norm(ws, Vector(u_lod[vi] - sol_rb[vi].uH)), ref_l2);

    row.l2_fem_lod =
        detail::rel(fem::l2_norm(ws, Vector(recon_lod[vi] - refs.u[vi])), refs.l2[vi]);
    row.l2_fem_rb =
        detail::rel(fem::l2_norm(ws, Vector(recon_rb[vi] - refs.u[vi])), refs.l2[vi]);
    row.l2_fem_ts =
        detail::rel(fem::l2_norm(ws, Vector(recon_ts[vi] - refs.u[vi])), refs.l2[vi]);

    row.res_norm = sol_ts[vi].res_norm;
    row.eta_a = sol_ts[vi].eta_a;
    row.eta_1 = sol_ts[vi].eta_1;
    row.eta_a_exact = stage2::kSqrt5 * row.res_norm / std::sqrt(bx.alpha);

    const SpMat A_fine = fem::assemble_fine_matrix(mesh, c.evaluate(validate[vi]), false);
    const Vector x = recon_lod[vi] - recon_ts[vi];
    row.true_energy = std::sqrt(std::max(0.0, x.dot(A_fine * x) + defect2[vi]));
    row.effectivity = row.true_energy > 0 ? row.eta_a_exact / row.true_energy
                                          : std::numeric_limits<double>::infinity();

    row.t_lod = t_lod[vi];
    row.t_rblod = t_rblod[vi];
    row.t_ts = t_ts[vi];

    cr.e_h1_lod_ts = std::max(cr.e_h1_lod_ts, row.h1_lod_ts);
    cr.e_l2_lod_ts = std::max(cr.e_l2_lod_ts, row.l2_lod_ts);
    cr.e_h1_lod_rb = std::max(cr.e_h1_lod_rb, row.h1_lod_rb);
    cr.e_l2_lod_rb = std::max(cr.e_l2_lod_rb, row.l2_lod_rb);
    cr.e_l2_fem_ts = std::max(cr.e_l2_fem_ts, row.l2_fem_ts);
    cr.e_l2_fem_rb = std::max(cr.e_l2_fem_rb, row.l2_fem_rb);
    cr.e_l2_fem_lod = std::max(cr.e_l2_fem_lod, row.l2_fem_lod);
    cr.max_eta_exact = std::max(cr.max_eta_exact, row.eta_a_exact);
    cr.max_true_energy = std::max(cr.max_true_energy, row.true_energy);
    cr.max_effectivity = std::max(cr.max_effectivity, row.effectivity);
    cr.min_margin = std::min(cr.min_margin, row.eta_a_exact - row.true_energy);

    cr.t.t_lod_avg += t_lod[vi] / n_val;
    cr.t.t_rblod_avg += t_rblod[vi] / n_val;
    cr.t.t_ts_avg += t_ts[vi] / n_val;
  }
}

// ---------------------------------------------------------------------------
// Model and report persistence.

namespace detail {
inline std::filesystem::path case_dir(const ExperimentConfig& cfg, int n_H) {
  return std::filesystem::path(cfg.outdir) /
         ("models_nH" + std::to_string(n_H));
}
}  // namespace detail

inline void save_case_models(const ExperimentConfig& cfg, int n_H,
                             const CaseModels& models) {
  namespace fs = std::filesystem;
  const fs::path dir = detail::case_dir(cfg, n_H);
  fs::create_directories(dir);
  for (std::size_t e = 0; e < models.roms.size(); ++e)
    stage1::save_corrector_rom(
        models.roms[e], (dir / ("rom_T" + std::to_string(e) + ".bin")).string());
  stage2::save_two_scale_rom(models.rom2, (dir / "rom2.json").string());
}

inline CaseModels load_case_models(const ExperimentConfig& cfg, int n_H) {
  namespace fs = std::filesystem;
  const fs::path dir = detail::case_dir(cfg, n_H);
  const int n_el = n_H * n_H;
  CaseModels m;
  m.roms.reserve(n_el);
  for (int e = 0; e < n_el; ++e) {
    const fs::path p = dir / ("rom_T" + std::to_string(e) + ".bin");
    if (!fs::exists(p)) throw Error("missing model file '" + p.string() + "'");
    m.roms.push_back(stage1::load_corrector_rom(p.string()));
  }
  m.rom2 = stage2::load_two_scale_rom((dir / "rom2.json").string());
  return m;
}

namespace detail {

inline nlohmann::json stats_to_json(const std::vector<ElementStat>& stats) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& s : stats)
    a.push_back({{"element", s.element},
                 {"N", s.N},
                 {"M", s.M},
                 {"iters", s.iters},
                 {"seconds", s.seconds}});
  return a;
}

template <class Row>
inline nlohmann::json trace_to_json(const std::vector<Row>& trace) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : trace) {
    nlohmann::json o = {{"iter", r.iter},
                        {"eta", r.eta},
                        {"param_index", r.param_index},
                        {"accepted", r.accepted}};
    if constexpr (requires { r.j; }) o["j"] = r.j;
    a.push_back(o);
  }
  return a;
}

inline nlohmann::json case_offline_json(const CaseResult& cr) {
  nlohmann::json j;
  j["n_H"] = cr.n_H;
  j["k"] = cr.k;
  j["rho"] = cr.rho;
  j["gamma_k"] = cr.gamma_k;
  j["alpha"] = cr.bounds.alpha;
  j["beta"] = cr.bounds.beta;
  j["kappa"] = cr.bounds.kappa;
  j["cum_size_s1"] = cr.cum_size_s1;
  j["av_size_s1"] = cr.av_size_s1;
  j["size_s2"] = cr.size_s2;
  j["m2"] = cr.m2;
  j["stalled"] = cr.stalled;
  j["zero_weight_final_eta"] = cr.zero_weight_final_eta;
  j["stage1_total"] = cr.t.stage1_total;
  j["stage1_avg"] = cr.t.stage1_avg;
  j["stage2"] = cr.t.stage2;
  j["offline"] = cr.t.offline;
  j["s1_stats"] = stats_to_json(cr.s1_stats);
  nlohmann::json traces = nlohmann::json::array();
  for (const auto& tr : cr.s1_traces) traces.push_back(trace_to_json(tr));
  j["s1_traces"] = traces;
  j["s2_trace"] = trace_to_json(cr.s2_trace);
  j["s2_zero_trace"] = trace_to_json(cr.s2_zero_trace);
  return j;
}

inline void case_offline_from_json(const nlohmann::json& j, CaseResult& cr) {
  cr.n_H = j.at("n_H").get<int>();
  cr.k = j.at("k").get<int>();
  cr.rho = j.at("rho").get<double>();
  cr.gamma_k = j.at("gamma_k").get<double>();
  cr.bounds.alpha = j.at("alpha").get<double>();
  cr.bounds.beta = j.at("beta").get<double>();
  cr.bounds.kappa = j.at("kappa").get<double>();
  cr.cum_size_s1 = j.at("cum_size_s1").get<long>();
  cr.av_size_s1 = j.at("av_size_s1").get<double>();
  cr.size_s2 = j.at("size_s2").get<int>();
  cr.m2 = j.at("m2").get<int>();
  cr.stalled = j.at("stalled").get<bool>();
  cr.zero_weight_final_eta = j.at("zero_weight_final_eta").get<double>();
  cr.t.stage1_total = j.at("stage1_total").get<double>();
  cr.t.stage1_avg = j.at("stage1_avg").get<double>();
  cr.t.stage2 = j.at("stage2").get<double>();
  cr.t.offline = j.at("offline").get<double>();
  for (const auto& s : j.at("s1_stats"))
    cr.s1_stats.push_back({s.at("element").get<int>(), s.at("N").get<int>(),
                           s.at("M").get<int>(), s.at("iters").get<int>(),
                           s.at("seconds").get<double>()});
  auto trace_row = [](const nlohmann::json& r, int j_default) {
    return std::tuple(r.at("iter").get<int>(), r.at("eta").get<double>(),
                      r.at("param_index").get<int>(), r.value("j", j_default),
                      r.at("accepted").get<bool>());
  };
  for (const auto& tj : j.at("s1_traces")) {
    std::vector<stage1::TraceRow> tr;
    for (const auto& r : tj) {
      auto [it, eta, pi, hj, acc] = trace_row(r, -1);
      tr.push_back({it, eta, pi, hj, acc});
    }
    cr.s1_traces.push_back(std::move(tr));
  }
  for (const auto& r : j.at("s2_trace")) {
    auto [it, eta, pi, hj, acc] = trace_row(r, -1);
    (void)hj;
    cr.s2_trace.push_back({it, eta, pi, acc});
  }
  for (const auto& r : j.at("s2_zero_trace")) {
    auto [it, eta, pi, hj, acc] = trace_row(r, -1);
    (void)hj;
    cr.s2_zero_trace.push_back({it, eta, pi, acc});
  }
}

}  // namespace detail

inline void save_case_offline(const ExperimentConfig& cfg, const CaseResult& cr) {
  namespace fs = std::filesystem;
  const fs::path dir = detail::case_dir(cfg, cr.n_H);
  fs::create_directories(dir);
  std::ofstream os(dir / "offline.json");
  os << detail::case_offline_json(cr).dump(1) << "\n";
  if (!os) throw Error("failed to write offline record");
}

inline CaseResult load_case_offline(const ExperimentConfig& cfg, int n_H) {
  namespace fs = std::filesystem;
  const fs::path p = detail::case_dir(cfg, n_H) / "offline.json";
  std::ifstream is(p);
  if (!is) throw Error("cannot open offline record '" + p.string() + "'");
  nlohmann::json j;
  is >> j;
  CaseResult cr;
  detail::case_offline_from_json(j, cr);
  return cr;
}

// ---------------------------------------------------------------------------
// Reports: one JSON with everything, one flat CSV of table metrics, one CSV
// with the greedy traces.

inline nlohmann::json report_json(const ExperimentResult& res) {
  nlohmann::json j;
  j["config"] = config_to_json(res.cfg);
  auto params = [](const std::vector<Vector>& ps) {
    nlohmann::json a = nlohmann::json::array();
    for (const Vector& mu : ps)
      a.push_back(std::vector<double>(mu.data(), mu.data() + mu.size()));
    return a;
  };
  j["train_params"] = params(res.train_params);
  j["validate_params"] = params(res.validate_params);
  j["fem_seconds"] = res.fem_seconds;
  j["total_seconds"] = res.total_seconds;
  j["cases"] = nlohmann::json::array();
  for (const CaseResult& cr : res.cases) {
    nlohmann::json cj = detail::case_offline_json(cr);
    cj["t_lod_avg"] = cr.t.t_lod_avg;
    cj["t_rblod_avg"] = cr.t.t_rblod_avg;
    cj["t_ts_avg"] = cr.t.t_ts_avg;
    cj["e_h1_lod_ts"] = cr.e_h1_lod_ts;
    cj["e_l2_lod_ts"] = cr.e_l2_lod_ts;
    cj["e_h1_lod_rb"] = cr.e_h1_lod_rb;
    cj["e_l2_lod_rb"] = cr.e_l2_lod_rb;
    cj["e_l2_fem_ts"] = cr.e_l2_fem_ts;
    cj["e_l2_fem_rb"] = cr.e_l2_fem_rb;
    cj["e_l2_fem_lod"] = cr.e_l2_fem_lod;
    cj["max_eta_exact"] = cr.max_eta_exact;
    cj["max_true_energy"] = cr.max_true_energy;
    cj["max_effectivity"] = cr.max_effectivity;
    cj["min_margin"] = cr.min_margin;
    nlohmann::json rows = nlohmann::json::array();
    for (const ValidationRow& r : cr.rows) {
      rows.push_back(
          {{"param_index", r.param_index},
           {"mu", std::vector<double>(r.mu.data(), r.mu.data() + r.mu.size())},
           {"alpha_mu", r.alpha_mu},
           {"kappa_mu", r.kappa_mu},
           {"h1_lod_ts", r.h1_lod_ts},
           {"l2_lod_ts", r.l2_lod_ts},
           {"h1_lod_rb", r.h1_lod_rb},
           {"l2_lod_rb", r.l2_lod_rb},
           {"l2_fem_ts", r.l2_fem_ts},
           {"l2_fem_rb", r.l2_fem_rb},
           {"l2_fem_lod", r.l2_fem_lod},
           {"res_norm", r.res_norm},
           {"eta_a", r.eta_a},
           {"eta_1", r.eta_1},
           {"eta_a_exact", r.eta_a_exact},
           {"true_energy", r.true_energy},
           {"effectivity", r.effectivity},
           {"t_lod", r.t_lod},
           {"t_rblod", r.t_rblod},
           {"t_ts", r.t_ts}});
    }
    cj["rows"] = rows;
    j["cases"].push_back(cj);
  }
  return j;
}

inline void write_tables_csv(const ExperimentResult& res, const std::string& path) {
  std::ofstream os(path);
  os << "method,n_H,metric,value\n";
  os.precision(10);
  auto put = [&](const std::string& m, int n_H, const std::string& key, double v) {
    os << m << "," << n_H << "," << key << "," << v << "\n";
  };
  for (const CaseResult& cr : res.cases) {
    put("lod", cr.n_H, "t_solve_avg", cr.t.t_lod_avg);
    put("lod", cr.n_H, "e_l2_rel_fem", cr.e_l2_fem_lod);

    put("rblod", cr.n_H, "t_offline1_av", cr.t.stage1_avg);
    put("rblod", cr.n_H, "t_offline1", cr.t.stage1_total);
    put("rblod", cr.n_H, "t_offline", cr.t.stage1_total);
    put("rblod", cr.n_H, "cum_size_s1", static_cast<double>(cr.cum_size_s1));
    put("rblod", cr.n_H, "av_size_s1", cr.av_size_s1);
    put("rblod", cr.n_H, "t_online", cr.t.t_rblod_avg);
    put("rblod", cr.n_H, "speedup_vs_lod",
        cr.t.t_rblod_avg > 0 ? cr.t.t_lod_avg / cr.t.t_rblod_avg : 0.0);
    put("rblod", cr.n_H, "e_h1_rel_lod", cr.e_h1_lod_rb);
    put("rblod", cr.n_H, "e_l2_rel_lod", cr.e_l2_lod_rb);
    put("rblod", cr.n_H, "e_l2_rel_fem", cr.e_l2_fem_rb);

    put("tsrblod", cr.n_H, "t_offline1_av", cr.t.stage1_avg);
    put("tsrblod", cr.n_H, "t_offline1", cr.t.stage1_total);
    put("tsrblod", cr.n_H, "t_offline2", cr.t.stage2);
    put("tsrblod", cr.n_H, "t_offline", cr.t.offline);
    put("tsrblod", cr.n_H, "cum_size_s1", static_cast<double>(cr.cum_size_s1));
    put("tsrblod", cr.n_H, "av_size_s1", cr.av_size_s1);
    put("tsrblod", cr.n_H, "size_s2", cr.size_s2);
    put("tsrblod", cr.n_H, "t_online", cr.t.t_ts_avg);
    put("tsrblod", cr.n_H, "speedup_vs_lod",
        cr.t.t_ts_avg > 0 ? cr.t.t_lod_avg / cr.t.t_ts_avg : 0.0);
    put("tsrblod", cr.n_H, "e_h1_rel_lod", cr.e_h1_lod_ts);
    put("tsrblod", cr.n_H, "e_l2_rel_lod", cr.e_l2_lod_ts);
    put("tsrblod", cr.n_H, "e_l2_rel_fem", cr.e_l2_fem_ts);
    put("tsrblod", cr.n_H, "max_eta_a_exact", cr.max_eta_exact);
    put("tsrblod", cr.n_H, "max_true_energy", cr.max_true_energy);
    put("tsrblod", cr.n_H, "max_effectivity", cr.max_effectivity);
  }
  if (!os) throw Error("failed to write '" + path + "'");
}

inline void write_trace_csv(const ExperimentResult& res, const std::string& path) {
  std::ofstream os(path);
  os << "stage,n_H,element,iter,eta,param_index,hat_index,accepted\n";
  os.precision(10);
  for (const CaseResult& cr : res.cases) {
    for (std::size_t e = 0; e < cr.s1_traces.size(); ++e)
      for (const auto& r : cr.s1_traces[e])
        os << "1," << cr.n_H << "," << e << "," << r.iter << "," << r.eta << ","
           << r.param_index << "," << r.j << "," << (r.accepted ? 1 : 0) << "\n";
    for (const auto& r : cr.s2_trace)
      os << "2," << cr.n_H << ",-1," << r.iter << "," << r.eta << ","
         << r.param_index << ",-1," << (r.accepted ? 1 : 0) << "\n";
    for (const auto& r : cr.s2_zero_trace)
      os << "2z," << cr.n_H << ",-1," << r.iter << "," << r.eta << ","
         << r.param_index << ",-1," << (r.accepted ? 1 : 0) << "\n";
  }
  if (!os) throw Error("failed to write '" + path + "'");
}

inline void write_outputs(const ExperimentResult& res) {
  namespace fs = std::filesystem;
  fs::create_directories(res.cfg.outdir);
  {
    std::ofstream os(fs::path(res.cfg.outdir) / "report.json");
    os << report_json(res).dump(1) << "\n";
    if (!os) throw Error("failed to write report.json");
  }
  write_tables_csv(res, (fs::path(res.cfg.outdir) / "tables.csv").string());
  write_trace_csv(res, (fs::path(res.cfg.outdir) / "greedy_trace.csv").string());
}

// ---------------------------------------------------------------------------
// Orchestration.

inline std::vector<Vector> training_set(const coeff::Problem& p,
                                        const ExperimentConfig& cfg) {
  return p.box.dim() == 1 ? p.box.equidistant(cfg.n_train)
                          : p.box.random_set(cfg.n_train, cfg.seed, 11);
}

inline std::vector<Vector> validation_set(const coeff::Problem& p,
                                          const ExperimentConfig& cfg) {
  return p.box.random_set(cfg.n_validate, cfg.seed, 12);
}

// Full experiment: offline and validation for every coarse mesh in the
// config. The fine references depend only on the coefficient and are shared
// across cases unless the problem itself is coarse-mesh dependent.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const double t_begin = wall_time();
  ExperimentResult res;
  res.cfg = cfg;
  const bool per_case_problem = cfg.problem == "tc2_analog";

  FineRefs refs;
  for (std::size_t ci = 0; ci < cfg.coarse.size(); ++ci) {
    const int n_H = cfg.coarse[ci];
    coeff::Problem problem =
        coeff::make_problem(cfg.problem, cfg.n_h, n_H, cfg.seed);
    if (ci == 0) {
      res.train_params = training_set(problem, cfg);
      res.validate_params = validation_set(problem, cfg);
    }
    if (refs.u.empty() || per_case_problem) {
      grid::MeshHierarchy mesh(cfg.n_h, n_H);
      fem::Workspace ws = fem::make_workspace(mesh);
      FineRefs fresh =
          compute_fine_refs(ws, problem.coefficient, res.validate_params);
      res.fem_seconds += fresh.seconds;
      refs = std::move(fresh);
    }
    CaseModels models;
    CaseResult cr =
        train_case(problem, cfg, n_H, res.train_params, res.validate_params, models);
    if (cfg.save_models) {
      save_case_models(cfg, n_H, models);
      save_case_offline(cfg, cr);
    }
    validate_case(problem, cfg, models, res.validate_params, refs, cr);
    res.cases.push_back(std::move(cr));
  }
  res.total_seconds = wall_time() - t_begin;
  return res;
}

// Offline-only run; models and offline records go to the output directory.
inline ExperimentResult run_offline(const ExperimentConfig& cfg) {
  const double t_begin = wall_time();
  ExperimentResult res;
  res.cfg = cfg;
  res.cfg.save_models = true;
  for (std::size_t ci = 0; ci < cfg.coarse.size(); ++ci) {
    const int n_H = cfg.coarse[ci];
    coeff::Problem problem =
        coeff::make_problem(cfg.problem, cfg.n_h, n_H, cfg.seed);
    if (ci == 0) {
      res.train_params = training_set(problem, cfg);
      res.validate_params = validation_set(problem, cfg);
    }
    CaseModels models;
    CaseResult cr =
        train_case(problem, cfg, n_H, res.train_params, res.validate_params, models);
    save_case_models(res.cfg, n_H, models);
    save_case_offline(res.cfg, cr);
    res.cases.push_back(std::move(cr));
  }
  res.total_seconds = wall_time() - t_begin;
  return res;
}

// Validation of previously trained models from the output directory.
inline ExperimentResult run_validate(const ExperimentConfig& cfg) {
  const double t_begin = wall_time();
  ExperimentResult res;
  res.cfg = cfg;
  const bool per_case_problem = cfg.problem == "tc2_analog";
  FineRefs refs;
  for (std::size_t ci = 0; ci < cfg.coarse.size(); ++ci) {
    const int n_H = cfg.coarse[ci];
    coeff::Problem problem =
        coeff::make_problem(cfg.problem, cfg.n_h, n_H, cfg.seed);
    if (ci == 0) {
      res.train_params = training_set(problem, cfg);
      res.validate_params = validation_set(problem, cfg);
    }
    if (refs.u.empty() || per_case_problem) {
      grid::MeshHierarchy mesh(cfg.n_h, n_H);
      fem::Workspace ws = fem::make_workspace(mesh);
      FineRefs fresh =
          compute_fine_refs(ws, problem.coefficient, res.validate_params);
      res.fem_seconds += fresh.seconds;
      refs = std::move(fresh);
    }
    CaseModels models = load_case_models(cfg, n_H);
    CaseResult cr = load_case_offline(cfg, n_H);
    validate_case(problem, cfg, models, res.validate_params, refs, cr);
    res.cases.push_back(std::move(cr));
  }
  res.total_seconds = wall_time() - t_begin;
  return res;
}

}  // namespace tslod::harness
