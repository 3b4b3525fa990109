#pragma once

// Shared fixtures and independent reference computations for the test suite.
// Everything here recomputes quantities from first principles so the library
// code under test never certifies itself.

#include <tslod/harness.hpp>

#include <Eigen/Eigenvalues>

#include <deque>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace support {

using namespace tslod;

struct DeskInstance {
  coeff::Problem problem;
  fem::Workspace ws;
  interp::InterpolationOperator ih;
  int k = 1;
};

inline DeskInstance make_desk(const std::string& problem, int n_h, int n_H,
                              int k, std::uint64_t seed = 7) {
  DeskInstance d;
  d.problem = coeff::make_problem(problem, n_h, n_H, seed);
  grid::MeshHierarchy mesh(n_h, n_H);
  d.ws = fem::make_workspace(mesh);
  d.ih = interp::make_interpolation(d.ws.mesh);
  d.k = k;
  return d;
}

inline Vector random_vector(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = g(rng);
  return v;
}

template <class T>
inline bool same_dense(const T& a, const T& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.array() == b.array()).all();
}

// Projects random fine vectors onto the interpolation kernel of one patch;
// the two-scale trial and test spaces constrain fine blocks this way.
class KernelSampler {
 public:
  KernelSampler(const fem::Workspace& ws, const interp::InterpolationOperator& ih,
                const coeff::SeparableCoefficient& c, int element, int k) {
    ops_ = lod::build_patch_operators(ws.mesh, ih, c, element, k);
    kkt_.compute(ops_.G_free, ops_.C, "kernel projector");
  }

  const lod::PatchOperators& ops() const { return ops_; }

  Vector draw(std::mt19937_64& rng) const {
    const Vector z = random_vector(rng, ops_.patch.n_free);
    return kkt_.solve(Vector(ops_.G_free * z), Vector::Zero(ops_.patch.m()))
        .x;
  }

 private:
  lod::PatchOperators ops_;
  linalg::SaddleSolver kkt_;
};

// Discrete H1 stability constant of the quasi-interpolation, computed as a
// dense generalized eigenvalue problem. Desk meshes only.
inline double measured_interpolation_stability(
    const fem::Workspace& ws, const interp::InterpolationOperator& ih) {
  const Matrix A = Matrix(ih.I.transpose() * ws.S_coarse * ih.I);
  const Matrix B = Matrix(ws.G_fine);
  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> es(A, B,
                                                      Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success)
    throw Error("stability eigenproblem failed");
  return std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
}

// Exact dual norm of the two-scale residual of a reduced solution, assembled
// from the full patch operators and fresh saddle point solves. Independent of
// the trained residual bases.
inline double brute_force_dual_residual(
    const fem::Workspace& ws, const interp::InterpolationOperator& ih,
    const coeff::SeparableCoefficient& c, int k, double rho,
    const std::vector<stage1::CorrectorROM>& roms, const Vector& uH,
    const std::vector<Vector>& f_coords, const Vector& mu) {
  const Vector th = lod::theta_vector(c, mu);
  const double srho = std::sqrt(rho);
  const SpMat A_fine = fem::assemble_fine_matrix(ws.mesh, c.evaluate(mu), false);

  Vector x = ws.E * uH;  // fine representative of the reduced solution
  double dual2 = 0.0;
  for (std::size_t e = 0; e < roms.size(); ++e) {
    const stage1::CorrectorROM& rom = roms[e];
    lod::PatchOperators ops =
        lod::build_patch_operators(ws.mesh, ih, c, static_cast<int>(e), k);
    Vector ue = Vector::Zero(ops.patch.n_free);
    if (rom.N() > 0) ue = rom.zeta * f_coords[e];
    lod::scatter_add(ws.mesh, ops.patch, ue, x, -1.0);

    const Vector y = lod::restrict_to_element(ops.patch, uH);
    const SpMat A_mu = lod::combine_patterned(ops.A_free, th);
    const Vector r_T =
        srho * (lod::corrector_rhs(ops, th, y) - A_mu * ue);
    linalg::SaddleSolver kkt;
    kkt.compute(ops.G_free, ops.C, "residual Riesz system");
    const Vector z = kkt.solve(r_T, Vector::Zero(ops.patch.m())).x;
    dual2 += r_T.dot(z);
  }
  const Vector g = ws.F_coarse - ws.E.transpose() * (A_fine * x);
  const Vector sg = linalg::solve_spd_sparse(ws.S_coarse, g, "coarse Gram");
  dual2 += g.dot(sg);
  return std::sqrt(std::max(0.0, dual2));
}

// Energy norm of the difference between the exact localized multiscale
// solution and a reduced two-scale solution, with the true correctors of both
// coarse parts solved exactly.
inline double true_energy_error(const lod::TwoScaleContext& ctx,
                                const std::vector<stage1::CorrectorROM>& roms,
                                const Vector& mu, const Vector& uH_ref,
                                const std::vector<Vector>& fine_ref,
                                const Vector& uH_red,
                                const std::vector<Vector>& f_coords) {
  lod::TwoScaleVector diff;
  diff.uH = uH_ref - uH_red;
  for (std::size_t e = 0; e < roms.size(); ++e) {
    Vector ue = Vector::Zero(ctx.ops[e].patch.n_free);
    if (roms[e].N() > 0) ue = roms[e].zeta * f_coords[e];
    diff.fine.push_back(fine_ref[e] - ue);
  }
  return lod::two_scale_norms(ctx, mu, diff).a;
}

// ---------------------------------------------------------------------------
// Property suites. Each returns human-readable violations; empty means pass.

inline std::vector<std::string> check_norm_equivalence(int trials,
                                                       std::uint64_t seed) {
  std::vector<std::string> bad;
  DeskInstance d = make_desk("tc1_analog", 32, 4, 1);
  const coeff::SeparableCoefficient& c = d.problem.coefficient;
  const double C_ovl = grid::overlap_constant(d.k);
  const double C_stab = measured_interpolation_stability(d.ws, d.ih);

  const int n_el = d.ws.mesh.coarse_elements();
  std::deque<KernelSampler> samplers;
  for (int e = 0; e < n_el; ++e)
    samplers.emplace_back(d.ws, d.ih, c, e, d.k);

  lod::TwoScaleContext ctx =
      lod::make_two_scale_context(d.ws, d.ih, c, d.k, 1.0);
  for (int t = 0; t < trials; ++t) {
    auto rng = make_rng(seed, t);
    const Vector mu = d.problem.box.sample(rng);
    const coeff::SpectralBounds bx = coeff::exact_bounds(c, mu);
    ctx.rho = std::max(1.0, C_ovl * bx.kappa);

    lod::TwoScaleVector U;
    U.uH = random_vector(rng, d.ws.mesh.coarse_dofs());
    for (int e = 0; e < n_el; ++e) U.fine.push_back(samplers[e].draw(rng));

    const lod::TwoScaleNorms n = lod::two_scale_norms(ctx, mu, U);
    const double upper = std::sqrt(3.0 * (1.0 + C_ovl) * bx.beta) * n.m;
    const double lower = std::sqrt(bx.alpha) * n.m;
    if (!(n.a <= upper * (1.0 + 1e-9) + 1e-14)) {
      std::ostringstream os;
      os << "trial " << t << ": a-norm " << n.a << " above upper bound "
         << upper;
      bad.push_back(os.str());
    }
    if (!(lower <= C_stab * n.a * (1.0 + 1e-9) + 1e-14)) {
      std::ostringstream os;
      os << "trial " << t << ": m-norm bound " << lower
         << " above stability bound " << C_stab * n.a;
      bad.push_back(os.str());
    }
  }
  return bad;
}

inline std::vector<std::string> check_energy_lemma(int trials,
                                                   std::uint64_t seed) {
  std::vector<std::string> bad;
  DeskInstance d = make_desk("tc1_analog", 32, 4, 1);
  const coeff::SeparableCoefficient& c = d.problem.coefficient;
  const int n_el = d.ws.mesh.coarse_elements();
  std::vector<lod::PatchOperators> ops;
  for (int e = 0; e < n_el; ++e)
    ops.push_back(lod::build_patch_operators(d.ws.mesh, d.ih, c, e, d.k));

  for (int t = 0; t < trials; ++t) {
    auto rng = make_rng(seed ^ 0x5eedu, t);
    const Vector mu = d.problem.box.sample(rng);
    const Vector th = lod::theta_vector(c, mu);
    const Vector uH = random_vector(rng, d.ws.mesh.coarse_dofs());
    double lhs = 0.0;
    for (int e = 0; e < n_el; ++e) {
      lod::CorrectorSolver cs(ops[e]);
      cs.factor(th);
      const Vector q =
          cs.solve_for(lod::restrict_to_element(ops[e].patch, uH));
      lhs += q.dot(cs.A_mu() * q);
    }
    const SpMat A_fine = fem::assemble_fine_matrix(d.ws.mesh, c.evaluate(mu), false);
    const Vector xu = d.ws.E * uH;
    const double rhs = xu.dot(A_fine * xu);
    if (!(lhs <= rhs * (1.0 + 1e-9) + 1e-14)) {
      std::ostringstream os;
      os << "trial " << t << ": corrector energy " << lhs
         << " exceeds coarse energy " << rhs;
      bad.push_back(os.str());
    }
  }
  return bad;
}

inline std::vector<std::string> check_overlap_bound(int trials,
                                                    std::uint64_t seed) {
  std::vector<std::string> bad;
  DeskInstance d = make_desk("tc1_analog", 32, 4, 1);
  const coeff::SeparableCoefficient& c = d.problem.coefficient;
  const double C_ovl = grid::overlap_constant(d.k);
  const int n_el = d.ws.mesh.coarse_elements();
  std::vector<lod::PatchOperators> ops;
  for (int e = 0; e < n_el; ++e)
    ops.push_back(lod::build_patch_operators(d.ws.mesh, d.ih, c, e, d.k));

  for (int t = 0; t < trials; ++t) {
    auto rng = make_rng(seed ^ 0x0f1du, t);
    const bool unit = t % 2 == 0;
    const Vector mu = d.problem.box.sample(rng);
    const Vector th = lod::theta_vector(c, mu);
    const SpMat A_fine =
        unit ? d.ws.G_fine
             : fem::assemble_fine_matrix(d.ws.mesh, c.evaluate(mu), false);
    Vector g = Vector::Zero(d.ws.mesh.fine_dofs());
    double rhs = 0.0;
    for (int e = 0; e < n_el; ++e) {
      const Vector v = random_vector(rng, ops[e].patch.n_free);
      lod::scatter_add(d.ws.mesh, ops[e].patch, v, g);
      const SpMat A_loc =
          unit ? ops[e].G_free : SpMat(lod::combine_patterned(ops[e].A_free, th));
      rhs += v.dot(A_loc * v);
    }
    const double lhs = g.dot(A_fine * g);
    if (!(lhs <= C_ovl * rhs * (1.0 + 1e-9) + 1e-14)) {
      std::ostringstream os;
      os << "trial " << t << ": overlap sum " << lhs << " exceeds "
         << C_ovl * rhs;
      bad.push_back(os.str());
    }
  }
  return bad;
}

// Accepted greedy pairs must be reproduced by the reduced corrector model to
// solver precision: their snapshots are in the basis.
inline std::vector<std::string> check_snapshot_reproduction(int pairs,
                                                            std::uint64_t seed) {
  std::vector<std::string> bad;
  DeskInstance d = make_desk("thermal_block", 32, 4, 1);
  const coeff::SeparableCoefficient& c = d.problem.coefficient;
  const std::vector<Vector> train =
      d.problem.box.random_set(15, seed, 3);
  stage1::Stage1Options o1;
  o1.eps1 = 1e-3;
  const coeff::SpectralBounds bounds = coeff::estimate_spectral_bounds(c, train);
  o1.alpha = bounds.alpha;
  o1.kappa = bounds.kappa;

  int checked = 0;
  const int n_el = d.ws.mesh.coarse_elements();
  for (int e = 0; e < n_el && checked < pairs; ++e) {
    stage1::TrainResult tr =
        stage1::train_corrector_rom(d.ws, d.ih, c, e, d.k, train, o1);
    lod::PatchOperators ops =
        lod::build_patch_operators(d.ws.mesh, d.ih, c, e, d.k);
    lod::CorrectorSolver cs(ops);
    for (const stage1::TraceRow& row : tr.trace) {
      if (!row.accepted || checked >= pairs) continue;
      const Vector& mu = train[row.param_index];
      Vector y = Vector::Zero(ops.patch.J_T());
      y[row.j] = 1.0;
      cs.factor(lod::theta_vector(c, mu));
      const Vector q = cs.solve_for(y);
      const Vector cr = stage1::reduced_corrector_solve(tr.rom, mu, y);
      const Vector diff = q - tr.rom.zeta * cr;
      const double err = std::sqrt(diff.dot(cs.A_mu() * diff));
      const double scale = std::sqrt(q.dot(cs.A_mu() * q));
      ++checked;
      if (!(err <= 1e-7 * std::max(scale, 1e-12))) {
        std::ostringstream os;
        os << "element " << e << " pair (" << row.param_index << "," << row.j
           << "): reproduction error " << err << " vs scale " << scale;
        bad.push_back(os.str());
      }
    }
  }
  if (checked < pairs)
    bad.push_back("too few accepted pairs to test reproduction");
  return bad;
}

inline std::vector<std::string> check_orthonormality(int trials,
                                                     std::uint64_t seed) {
  std::vector<std::string> bad;
  for (int t = 0; t < trials; ++t) {
    auto rng = make_rng(seed ^ 0x0407u, t);
    std::uniform_int_distribution<int> dim(5, 40);
    const int n = dim(rng);
    const int m = 1 + dim(rng) % (n + 5);
    Matrix R = Matrix::NullaryExpr(
        n, n, [&](Eigen::Index, Eigen::Index) {
          std::normal_distribution<double> g;
          return g(rng);
        });
    const Matrix M = R.transpose() * R + 1e-3 * Matrix::Identity(n, n);
    auto ip = [&](const Vector& a, const Vector& b) { return a.dot(M * b); };

    std::vector<Vector> vs;
    for (int i = 0; i < m; ++i) vs.push_back(random_vector(rng, n));
    linalg::orthonormalize(vs, ip);
    for (std::size_t i = 0; i < vs.size(); ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        const double gij = ip(vs[i], vs[j]);
        const double want = i == j ? 1.0 : 0.0;
        if (std::abs(gij - want) > 1e-8) {
          std::ostringstream os;
          os << "trial " << t << ": gram(" << i << "," << j << ") = " << gij;
          bad.push_back(os.str());
        }
      }

    // Duplicates of basis vectors must be dropped by the extender.
    std::vector<Vector> basis = vs;
    std::vector<Vector> adds;
    adds.push_back(basis.empty() ? random_vector(rng, n) : basis[0]);
    adds.push_back(random_vector(rng, n));
    const int before = static_cast<int>(basis.size());
    const int added = linalg::orthonormalize_extend(basis, adds, ip);
    if (!basis.empty() && before > 0 && added > 1) {
      std::ostringstream os;
      os << "trial " << t << ": duplicate vector not dropped, added " << added;
      bad.push_back(os.str());
    }
    for (std::size_t i = 0; i < basis.size(); ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        const double gij = ip(basis[i], basis[j]);
        const double want = i == j ? 1.0 : 0.0;
        if (std::abs(gij - want) > 1e-8) {
          std::ostringstream os;
          os << "trial " << t << ": extended gram(" << i << "," << j
             << ") = " << gij;
          bad.push_back(os.str());
        }
      }
  }
  return bad;
}

inline std::vector<std::string> check_determinism(std::uint64_t seed) {
  std::vector<std::string> bad;
  // Parameter draws: same seed and stream agree bitwise, streams differ.
  coeff::Problem p = coeff::make_problem("thermal_block", 16, 4, seed);
  for (int t = 0; t < 20; ++t) {
    const auto a = p.box.random_set(6, seed + t, 5);
    const auto b = p.box.random_set(6, seed + t, 5);
    const auto c = p.box.random_set(6, seed + t, 6);
    bool same = true, differ = false;
    for (int i = 0; i < 6; ++i) {
      if (!same_dense(a[i], b[i])) same = false;
      if (!same_dense(a[i], c[i])) differ = true;
    }
    if (!same) bad.push_back("random_set not reproducible");
    if (!differ) bad.push_back("random_set streams collide");
  }

  DeskInstance d = make_desk("thermal_block", 32, 4, 1);
  const coeff::SeparableCoefficient& c = d.problem.coefficient;
  const std::vector<Vector> train = d.problem.box.random_set(10, seed, 3);
  stage1::Stage1Options o1;
  o1.eps1 = 1e-2;
  const coeff::SpectralBounds bounds = coeff::estimate_spectral_bounds(c, train);
  o1.alpha = bounds.alpha;
  o1.kappa = bounds.kappa;
  std::vector<stage1::CorrectorROM> roms;
  for (int e = 0; e < 3; ++e) {
    stage1::TrainResult t1 =
        stage1::train_corrector_rom(d.ws, d.ih, c, e, d.k, train, o1);
    stage1::TrainResult t2 =
        stage1::train_corrector_rom(d.ws, d.ih, c, e, d.k, train, o1);
    if (t1.rom.N() != t2.rom.N() || t1.trace.size() != t2.trace.size())
      bad.push_back("stage 1 training not deterministic in size");
    for (std::size_t i = 0; i < std::min(t1.trace.size(), t2.trace.size()); ++i)
      if (t1.trace[i].eta != t2.trace[i].eta ||
          t1.trace[i].param_index != t2.trace[i].param_index ||
          t1.trace[i].j != t2.trace[i].j)
        bad.push_back("stage 1 trace differs between runs");
    if (!same_dense(t1.rom.G_basis, t2.rom.G_basis))
      bad.push_back("stage 1 basis differs between runs");
    roms.push_back(std::move(t1.rom));
  }

  // Stage 2 on the full element set of a smaller mesh.
  DeskInstance d2 = make_desk("tc1_analog", 32, 4, 1);
  const coeff::SeparableCoefficient& c2 = d2.problem.coefficient;
  const std::vector<Vector> train2 = d2.problem.box.equidistant(10);
  const coeff::SpectralBounds b2 = coeff::estimate_spectral_bounds(c2, train2);
  stage1::Stage1Options o2;
  o2.eps1 = 1e-2;
  o2.alpha = b2.alpha;
  o2.kappa = b2.kappa;
  std::vector<stage1::CorrectorROM> roms2;
  for (int e = 0; e < d2.ws.mesh.coarse_elements(); ++e)
    roms2.push_back(
        stage1::train_corrector_rom(d2.ws, d2.ih, c2, e, d2.k, train2, o2).rom);
  stage2::Stage2Options s2o;
  s2o.eps2 = 1e-2;
  s2o.rho = lod::rho_default(d2.k, b2.kappa);
  s2o.gamma_k = std::sqrt(b2.alpha);
  s2o.alpha = b2.alpha;
  s2o.kappa = b2.kappa;
  stage2::Stage2TrainResult r1 =
      stage2::train_two_scale_rom(roms2, d2.ws, train2, d2.k, s2o);
  stage2::Stage2TrainResult r2 =
      stage2::train_two_scale_rom(roms2, d2.ws, train2, d2.k, s2o);
  if (r1.rom.N2() != r2.rom.N2() || r1.trace.size() != r2.trace.size())
    bad.push_back("stage 2 training not deterministic in size");
  for (std::size_t i = 0; i < std::min(r1.trace.size(), r2.trace.size()); ++i)
    if (r1.trace[i].eta != r2.trace[i].eta ||
        r1.trace[i].param_index != r2.trace[i].param_index)
      bad.push_back("stage 2 trace differs between runs");
  for (int q = 0; q < r1.rom.Q() && q < r2.rom.Q(); ++q)
    if (!same_dense(r1.rom.A_hat[q], r2.rom.A_hat[q]))
      bad.push_back("stage 2 operators differ between runs");
  return bad;
}

}  // namespace support
