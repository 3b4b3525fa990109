#pragma once

// Stage 1: one reduced corrector model per coarse element. Training is a
// weak greedy over (training parameter, element hat) pairs driven by an
// online residual estimator in a Riesz residual basis; every accepted
// snapshot is a true corrector solve. The resulting model answers corrector
// problems, error estimates, and localized coarse stiffness contributions
// without any fine-scale data; the fine basis itself is kept only when
// reconstruction is requested.

#include <fstream>
#include <optional>
#include <set>

#include <json.hpp>

#include "tslod/lod.hpp"

namespace tslod::stage1 {

struct CorrectorROM {
  int element = -1;
  int k = 0;
  double eps1 = 0;
  double alpha_train = 0, kappa_train = 0;
  std::uint64_t training_hash = 0;
  std::vector<int> t_nodes;        // global coarse ids the element trials
  std::vector<int> coupled_nodes;  // global coarse ids the element tests
  std::vector<coeff::Theta> thetas;

  std::vector<Matrix> A_red;               // per q, N x N: a_q on the basis
  std::vector<std::vector<Vector>> G_red;  // [q][j], length N
  std::vector<Matrix> A_hat;               // per q, M x N residual coords
  std::vector<std::vector<Vector>> G_hat;  // [q][j], length M
  std::vector<Matrix> K0;                  // per q, J x J, stiffness on T
  std::vector<Matrix> Krb;                 // per q, m x N coarse coupling
  Matrix G_basis;                          // N x N basis Gram, patch H1

  Matrix zeta;  // fine basis, free x N; empty when not retained

  int N() const { return A_red.empty() ? 0 : static_cast<int>(A_red[0].cols()); }
  int M() const { return A_hat.empty() ? 0 : static_cast<int>(A_hat[0].rows()); }
  int Q() const { return static_cast<int>(A_red.size()); }
  int J() const { return static_cast<int>(t_nodes.size()); }
  int m() const { return static_cast<int>(coupled_nodes.size()); }

  Vector theta_vec(const Vector& mu) const {
    Vector th(Q());
    for (int q = 0; q < Q(); ++q) th[q] = thetas[q](mu);
    return th;
  }
};

struct TraceRow {
  int iter = 0;
  double eta = 0;
  int param_index = -1;
  int j = -1;
  bool accepted = false;
};

struct Stage1Options {
  double eps1 = 1e-3;
  int max_iter = 200;
  bool retain_basis = true;
  double alpha = 1.0;   // training coercivity bound for the estimator
  double kappa = 1.0;   // training contrast bound, metadata and diagnostics
};

struct TrainResult {
  CorrectorROM rom;
  std::vector<TraceRow> trace;
};

namespace detail {
inline Matrix reduced_system(const CorrectorROM& rom, const Vector& th) {
  Matrix A = Matrix::Zero(rom.N(), rom.N());
  for (int q = 0; q < rom.Q(); ++q) A += th[q] * rom.A_red[q];
  return A;
}
inline Vector reduced_rhs(const CorrectorROM& rom, const Vector& th,
                          const Vector& y) {
  Vector b = Vector::Zero(rom.N());
  for (int q = 0; q < rom.Q(); ++q)
    for (int j = 0; j < rom.J(); ++j) b += th[q] * y[j] * rom.G_red[q][j];
  return b;
}
}  // namespace detail

// Reduced corrector coefficients for a coarse function with values y on the
// element's interior corners.
inline Vector reduced_corrector_solve(const CorrectorROM& rom, const Vector& mu,
                                      const Vector& y) {
  if (rom.N() == 0) return Vector::Zero(0);
  const Vector th = rom.theta_vec(mu);
  Eigen::LLT<Matrix> llt(detail::reduced_system(rom, th));
  if (llt.info() != Eigen::Success)
    throw Error("reduced corrector system is not positive definite");
  return llt.solve(detail::reduced_rhs(rom, th, y));
}

// All element hats at once: columns are the reduced correctors of the J
// interior corner hats.
inline Matrix reduced_corrector_all(const CorrectorROM& rom, const Vector& mu) {
  Matrix C = Matrix::Zero(rom.N(), rom.J());
  if (rom.N() == 0) return C;
  const Vector th = rom.theta_vec(mu);
  Eigen::LLT<Matrix> llt(detail::reduced_system(rom, th));
  if (llt.info() != Eigen::Success)
    throw Error("reduced corrector system is not positive definite");
  for (int j = 0; j < rom.J(); ++j) {
    Vector y = Vector::Zero(rom.J());
    y[j] = 1.0;
    C.col(j) = llt.solve(detail::reduced_rhs(rom, th, y));
  }
  return C;
}

struct CorrectorEstimate {
  double eta = 0;        // alpha-scaled error bound in the patch energy norm
  double dual_norm = 0;  // unscaled residual dual norm
  Vector c;              // the reduced solution the estimate refers to
};

// Online error estimate for one corrector problem; alpha defaults to the
// training bound but an exact per-parameter value can be substituted.
inline CorrectorEstimate corrector_error_estimate(
    const CorrectorROM& rom, const Vector& mu, const Vector& y,
    std::optional<double> alpha = std::nullopt) {
  const Vector th = rom.theta_vec(mu);
  CorrectorEstimate out;
  out.c = reduced_corrector_solve(rom, mu, y);
  Vector r = Vector::Zero(rom.M());
  for (int q = 0; q < rom.Q(); ++q) {
    Vector rq = Vector::Zero(rom.M());
    for (int j = 0; j < rom.J(); ++j) rq += y[j] * rom.G_hat[q][j];
    if (rom.N() > 0) rq -= rom.A_hat[q] * out.c;
    r += th[q] * rq;
  }
  out.dual_norm = r.norm();
  out.eta = out.dual_norm / std::sqrt(alpha.value_or(rom.alpha_train));
  return out;
}

inline TrainResult train_corrector_rom(const fem::Workspace& ws,
                                       const interp::InterpolationOperator& ih,
                                       const coeff::SeparableCoefficient& coef,
                                       int element, int k,
                                       const std::vector<Vector>& train_params,
                                       const Stage1Options& opts) {
  const grid::MeshHierarchy& mesh = ws.mesh;
  lod::PatchOperators ops = lod::build_patch_operators(mesh, ih, coef, element, k);
  const grid::Patch& p = ops.patch;
  const int Q = coef.Q(), J = p.J_T(), m = p.m();

  CorrectorROM rom;
  rom.element = element;
  rom.k = k;
  rom.eps1 = opts.eps1;
  rom.alpha_train = opts.alpha;
  rom.kappa_train = opts.kappa;
  rom.t_nodes = p.t_nodes;
  rom.coupled_nodes = p.coupled_nodes;
  rom.thetas = coef.thetas;
  rom.K0 = ops.K0;
  {
    std::vector<double> flat;
    for (const Vector& mu : train_params)
      for (int d = 0; d < mu.size(); ++d) flat.push_back(mu[d]);
    rom.training_hash = hash_doubles(flat);
  }

  linalg::SaddleSolver h1;
  h1.compute(ops.G_free, ops.C, "patch Riesz system");
  auto riesz = [&](const Vector& f) { return h1.solve(f).x; };
  auto gip = [&](const Vector& u, const Vector& v) {
    return u.dot(ops.G_free * v);
  };
  // Projection onto the interpolation kernel; keeps every retained basis
  // direction blind to the constraint multipliers of the residuals. The cheap
  // annihilator lands in the kernel exactly like the metric projection would,
  // up to an in-kernel perturbation of the size of the incoming violation.
  linalg::ConstraintAnnihilator onto_kernel(ops.C);
  auto kproj = [&](const Vector& v) { return onto_kernel.apply(v); };

  // Residual basis seeded with the right-hand-side generators.
  std::vector<Vector> what;
  {
    std::vector<Vector> gens;
    for (int q = 0; q < Q; ++q)
      for (int j = 0; j < J; ++j) gens.push_back(riesz(ops.rhs_gen[q][j]));
    linalg::orthonormalize_extend_conforming(what, gens, gip, kproj);
  }
  rom.G_hat.assign(Q, std::vector<Vector>(J));
  for (int q = 0; q < Q; ++q)
    for (int j = 0; j < J; ++j) {
      rom.G_hat[q][j].resize(what.size());
      for (std::size_t mm = 0; mm < what.size(); ++mm)
        rom.G_hat[q][j][mm] = ops.rhs_gen[q][j].dot(what[mm]);
    }
  rom.A_red.assign(Q, Matrix::Zero(0, 0));
  rom.A_hat.assign(Q, Matrix::Zero(static_cast<int>(what.size()), 0));
  rom.G_red.assign(Q, std::vector<Vector>(J, Vector::Zero(0)));
  rom.Krb.assign(Q, Matrix::Zero(m, 0));
  rom.G_basis = Matrix::Zero(0, 0);

  std::vector<Vector> zeta;
  std::vector<std::vector<Vector>> az(Q);  // A_q * zeta_n caches
  lod::CorrectorSolver cs(ops);
  std::set<std::pair<int, int>> excluded;
  std::vector<TraceRow> trace;
  const double sqrt_alpha = std::sqrt(opts.alpha);

  for (int iter = 0;; ++iter) {
    if (iter > opts.max_iter)
      throw Error("corrector training exceeded the iteration cap");
    double best = -1.0;
    int bp = -1, bj = -1;
    const int N = static_cast<int>(zeta.size());
    for (std::size_t pi = 0; pi < train_params.size(); ++pi) {
      const Vector th = rom.theta_vec(train_params[pi]);
      Eigen::LLT<Matrix> llt;
      if (N > 0) {
        llt.compute(detail::reduced_system(rom, th));
        if (llt.info() != Eigen::Success)
          throw Error("reduced corrector system is not positive definite");
      }
      Matrix ah = Matrix::Zero(static_cast<int>(what.size()), N);
      for (int q = 0; q < Q; ++q) ah += th[q] * rom.A_hat[q];
      for (int j = 0; j < J; ++j) {
        if (excluded.count({static_cast<int>(pi), j})) continue;
        Vector r = Vector::Zero(static_cast<int>(what.size()));
        for (int q = 0; q < Q; ++q)
          r += th[q] * rom.G_hat[q][j];
        if (N > 0) {
          Vector y = Vector::Zero(J);
          y[j] = 1.0;
          r -= ah * llt.solve(detail::reduced_rhs(rom, th, y));
        }
        const double eta = r.norm() / sqrt_alpha;
        if (eta > best) {
          best = eta;
          bp = static_cast<int>(pi);
          bj = j;
        }
      }
    }
    trace.push_back({iter, best, bp, bj, false});
    if (best <= opts.eps1 || bp < 0) break;

    cs.factor(rom.theta_vec(train_params[bp]));
    Vector y = Vector::Zero(J);
    y[bj] = 1.0;
    Vector qnew = cs.solve_for(y);
    const double n0 = std::sqrt(std::max(0.0, gip(qnew, qnew)));
    for (int sweep = 0; sweep < 2 && n0 > 0; ++sweep)
      for (const Vector& z : zeta) qnew -= gip(z, qnew) * z;
    if (n0 > 0) {
      qnew = kproj(qnew);
      for (const Vector& z : zeta) qnew -= gip(z, qnew) * z;
    }
    const double n1 = std::sqrt(std::max(0.0, gip(qnew, qnew)));
    if (!(n0 > 0.0) || n1 < linalg::kDropTol * n0) {
      // Snapshot already captured by the basis: exclude this candidate so
      // the greedy cannot stall on it.
      excluded.insert({bp, bj});
      continue;
    }
    qnew /= n1;
    trace.back().accepted = true;
    zeta.push_back(qnew);
    const int Nn = static_cast<int>(zeta.size());

    Vector gz = ops.G_free * qnew;
    rom.G_basis.conservativeResize(Nn, Nn);
    for (int n = 0; n < Nn; ++n) {
      const double v = zeta[n].dot(gz);
      rom.G_basis(n, Nn - 1) = v;
      rom.G_basis(Nn - 1, n) = v;
    }
    std::vector<Vector> reps;
    for (int q = 0; q < Q; ++q) {
      Vector a = ops.A_free[q] * qnew;
      az[q].push_back(a);
      reps.push_back(riesz(a));
      rom.A_red[q].conservativeResize(Nn, Nn);
      for (int n = 0; n < Nn; ++n) {
        rom.A_red[q](n, Nn - 1) = zeta[n].dot(az[q][Nn - 1]);
        if (n < Nn - 1) rom.A_red[q](Nn - 1, n) = zeta[Nn - 1].dot(az[q][n]);
      }
      for (int j = 0; j < J; ++j) {
        rom.G_red[q][j].conservativeResize(Nn);
        rom.G_red[q][j][Nn - 1] = qnew.dot(ops.rhs_gen[q][j]);
      }
      rom.Krb[q].conservativeResize(m, Nn);
      rom.Krb[q].col(Nn - 1) = ops.Phi.transpose() * (ops.A_all_free[q] * qnew);
    }
    const int oldM = static_cast<int>(what.size());
    linalg::orthonormalize_extend_conforming(what, reps, gip, kproj);
    const int newM = static_cast<int>(what.size());
    for (int q = 0; q < Q; ++q) {
      for (int j = 0; j < J; ++j) {
        rom.G_hat[q][j].conservativeResize(newM);
        for (int mm = oldM; mm < newM; ++mm)
          rom.G_hat[q][j][mm] = ops.rhs_gen[q][j].dot(what[mm]);
      }
      rom.A_hat[q].conservativeResize(newM, Nn);
      for (int mm = 0; mm < newM; ++mm)
        rom.A_hat[q](mm, Nn - 1) = what[mm].dot(az[q][Nn - 1]);
      for (int mm = oldM; mm < newM; ++mm)
        for (int n = 0; n < Nn - 1; ++n)
          rom.A_hat[q](mm, n) = what[mm].dot(az[q][n]);
    }
  }

  if (opts.retain_basis && !zeta.empty()) {
    rom.zeta.resize(p.n_free, static_cast<int>(zeta.size()));
    for (std::size_t n = 0; n < zeta.size(); ++n) rom.zeta.col(n) = zeta[n];
  }
  return {std::move(rom), std::move(trace)};
}

// Reduced localized coarse stiffness: the per-element blocks use the reduced
// correctors in place of the true ones.
inline SpMat assemble_reduced_coarse_matrix(
    const std::vector<CorrectorROM>& roms, const grid::MeshHierarchy& mesh,
    const Vector& mu, std::vector<Matrix>* corrector_maps = nullptr) {
  std::vector<Triplet> t;
  if (corrector_maps) corrector_maps->resize(roms.size());
  for (const CorrectorROM& rom : roms) {
    const Vector th = rom.theta_vec(mu);
    const Matrix C = reduced_corrector_all(rom, mu);  // N x J
    Matrix Kel = Matrix::Zero(rom.m(), rom.J());
    for (int q = 0; q < rom.Q(); ++q) Kel -= th[q] * (rom.Krb[q] * C);
    Matrix K0mu = Matrix::Zero(rom.J(), rom.J());
    for (int q = 0; q < rom.Q(); ++q) K0mu += th[q] * rom.K0[q];
    for (int j1 = 0; j1 < rom.J(); ++j1) {
      const int row = static_cast<int>(
          std::find(rom.coupled_nodes.begin(), rom.coupled_nodes.end(),
                    rom.t_nodes[j1]) -
          rom.coupled_nodes.begin());
      Kel.row(row) += K0mu.row(j1);
    }
    for (int j = 0; j < rom.J(); ++j)
      for (int rl = 0; rl < rom.m(); ++rl)
        t.emplace_back(rom.coupled_nodes[rl], rom.t_nodes[j], Kel(rl, j));
    if (corrector_maps)
      (*corrector_maps)[&rom - roms.data()] = C;
  }
  SpMat K(mesh.coarse_dofs(), mesh.coarse_dofs());
  K.setFromTriplets(t.begin(), t.end());
  return K;
}

struct RblodSolution {
  Vector uH;
  std::vector<Vector> c;  // reduced corrector coefficients of the solution
};

// Coarse solve with the reduced multiscale stiffness; the per-element
// corrector solves happen sequentially during assembly, which is exactly the
// cost profile this baseline is meant to exhibit.
inline RblodSolution rblod_solve(const std::vector<CorrectorROM>& roms,
                                 const fem::Workspace& ws, const Vector& mu) {
  std::vector<Matrix> maps;
  SpMat K = assemble_reduced_coarse_matrix(roms, ws.mesh, mu, &maps);
  RblodSolution sol;
  sol.uH = lod::solve_coarse_system(K, ws.F_coarse, "reduced multiscale system");
  sol.c.resize(roms.size());
  for (std::size_t e = 0; e < roms.size(); ++e) {
    Vector y(roms[e].J());
    for (int j = 0; j < roms[e].J(); ++j) y[j] = sol.uH[roms[e].t_nodes[j]];
    sol.c[e] = maps[e] * y;
  }
  return sol;
}

// ---------------------------------------------------------------------------
// Serialization: little-endian binary container with a JSON header, one file
// per element.

namespace detail {
inline void write_doubles(std::ofstream& os, const double* p, std::size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}
inline void read_doubles(std::ifstream& is, double* p, std::size_t n) {
  is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw Error("corrector model file truncated");
}
}  // namespace detail

inline void save_corrector_rom(const CorrectorROM& rom, const std::string& path) {
  nlohmann::json h;
  h["format"] = "corrector-rom";
  h["version"] = 1;
  h["byte_order"] = "little";
  h["element"] = rom.element;
  h["k"] = rom.k;
  h["eps1"] = rom.eps1;
  h["alpha_train"] = rom.alpha_train;
  h["kappa_train"] = rom.kappa_train;
  h["training_hash"] = rom.training_hash;
  h["t_nodes"] = rom.t_nodes;
  h["coupled_nodes"] = rom.coupled_nodes;
  h["Q"] = rom.Q();
  h["N"] = rom.N();
  h["M"] = rom.M();
  h["n_free"] = static_cast<int>(rom.zeta.rows());
  h["retained"] = rom.zeta.size() > 0;
  std::vector<nlohmann::json> th;
  for (const auto& s : rom.thetas)
    th.push_back({{"kind", s.kind == coeff::Theta::Kind::One ? "one" : "component"},
                  {"index", s.index}});
  h["thetas"] = th;
  const std::string header = h.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write corrector model to " + path);
  const char magic[8] = {'T', 'S', 'R', 'O', 'M', '1', '\n', 0};
  os.write(magic, 8);
  const std::uint64_t hlen = header.size();
  os.write(reinterpret_cast<const char*>(&hlen), 8);
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  auto wm = [&](const Matrix& A) { detail::write_doubles(os, A.data(), A.size()); };
  for (const auto& A : rom.A_red) wm(A);
  for (const auto& qa : rom.G_red)
    for (const auto& v : qa) detail::write_doubles(os, v.data(), v.size());
  for (const auto& A : rom.A_hat) wm(A);
  for (const auto& qa : rom.G_hat)
    for (const auto& v : qa) detail::write_doubles(os, v.data(), v.size());
  for (const auto& A : rom.K0) wm(A);
  for (const auto& A : rom.Krb) wm(A);
  wm(rom.G_basis);
  if (rom.zeta.size() > 0) wm(rom.zeta);
  if (!os) throw Error("failed writing corrector model to " + path);
}

inline CorrectorROM load_corrector_rom(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read corrector model from " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 6) != "TSROM1")
    throw Error("not a corrector model file: " + path);
  std::uint64_t hlen = 0;
  is.read(reinterpret_cast<char*>(&hlen), 8);
  std::string header(hlen, '\0');
  is.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw Error("corrector model header truncated: " + path);
  nlohmann::json h = nlohmann::json::parse(header);

  CorrectorROM rom;
  rom.element = h.at("element");
  rom.k = h.at("k");
  rom.eps1 = h.at("eps1");
  rom.alpha_train = h.at("alpha_train");
  rom.kappa_train = h.at("kappa_train");
  rom.training_hash = h.at("training_hash");
  rom.t_nodes = h.at("t_nodes").get<std::vector<int>>();
  rom.coupled_nodes = h.at("coupled_nodes").get<std::vector<int>>();
  for (const auto& s : h.at("thetas")) {
    coeff::Theta t;
    t.kind = s.at("kind") == "one" ? coeff::Theta::Kind::One
                                   : coeff::Theta::Kind::Component;
    t.index = s.at("index");
    rom.thetas.push_back(t);
  }
  const int Q = h.at("Q"), N = h.at("N"), M = h.at("M");
  const int J = static_cast<int>(rom.t_nodes.size());
  const int m = static_cast<int>(rom.coupled_nodes.size());
  const int n_free = h.at("n_free");
  const bool retained = h.at("retained");

  auto rm = [&](int rows, int cols) {
    Matrix A(rows, cols);
    detail::read_doubles(is, A.data(), static_cast<std::size_t>(A.size()));
    return A;
  };
  for (int q = 0; q < Q; ++q) rom.A_red.push_back(rm(N, N));
  rom.G_red.assign(Q, {});
  for (int q = 0; q < Q; ++q)
    for (int j = 0; j < J; ++j) {
      Vector v(N);
      detail::read_doubles(is, v.data(), static_cast<std::size_t>(N));
      rom.G_red[q].push_back(v);
    }
  for (int q = 0; q < Q; ++q) rom.A_hat.push_back(rm(M, N));
  rom.G_hat.assign(Q, {});
  for (int q = 0; q < Q; ++q)
    for (int j = 0; j < J; ++j) {
      Vector v(M);
      detail::read_doubles(is, v.data(), static_cast<std::size_t>(M));
      rom.G_hat[q].push_back(v);
    }
  for (int q = 0; q < Q; ++q) rom.K0.push_back(rm(J, J));
  for (int q = 0; q < Q; ++q) rom.Krb.push_back(rm(m, N));
  rom.G_basis = rm(N, N);
  if (retained) rom.zeta = rm(n_free, N);
  return rom;
}

}  // namespace tslod::stage1
