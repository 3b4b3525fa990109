#pragma once

// Petrov-Galerkin localized orthogonal decomposition and its two-scale
// reformulation. Each coarse element T carries a patch U_k(T); correctors
// live in the patch-local fine-scale space ker(I_H) and are computed from
// saddle-point systems with the interpolation rows as constraints. The
// localized multiscale stiffness couples the element's own coarse hats
// (columns) to every coarse hat meeting the patch (rows). The two-scale form
// B_mu rewrites the same problem over coarse x fine-scale blocks; its
// monolithic solve exists for verification only.

#include <Eigen/SparseLU>

#include <optional>

#include "tslod/coeff.hpp"
#include "tslod/common.hpp"
#include "tslod/fem.hpp"
#include "tslod/grid.hpp"
#include "tslod/interpolation.hpp"
#include "tslod/linalg.hpp"

namespace tslod::lod {

inline double rho_default(int k, double kappa) {
  return std::max(1.0, grid::overlap_constant(k) * kappa);
}

// Parameter-independent matrices of one element patch. The component
// stiffness matrices share one sparsity pattern (zero cells still emit
// entries), so A_mu is a pure value combination and KKT refactorizations can
// reuse the symbolic analysis.
struct PatchOperators {
  grid::Patch patch;
  int Q = 0;
  std::vector<SpMat> A_free;      // per q, free x free patch stiffness
  std::vector<SpMat> A_all_free;  // per q, rows extended to the patch hull
  SpMat G_free;                   // unit-coefficient H1 Gram on the patch
  SpMat C;                        // kernel constraints, m x free
  SpMat Phi;                      // n_all x m, coarse hat values on patch nodes
  std::vector<std::vector<Vector>> rhs_gen;  // [q][j]: a^T_q(phi_{i_{T,j}}, .)
  std::vector<Matrix> K0;         // per q, J x J stiffness restricted to T
  std::vector<int> t_in_coupled;  // position of each t_node in coupled_nodes
};

inline SpMat combine_patterned(const std::vector<SpMat>& parts,
                               const Vector& w) {
  SpMat out = parts[0];
  out.makeCompressed();
  Eigen::Map<Vector> v(out.valuePtr(), out.nonZeros());
  v *= w[0];
  for (std::size_t q = 1; q < parts.size(); ++q) {
    if (parts[q].nonZeros() != out.nonZeros())
      throw Error("component matrices do not share a sparsity pattern");
    v += w[q] * Eigen::Map<const Vector>(parts[q].valuePtr(), out.nonZeros());
  }
  return out;
}

inline Vector theta_vector(const coeff::SeparableCoefficient& c, const Vector& mu) {
  Vector th(c.Q());
  for (int q = 0; q < c.Q(); ++q) th[q] = c.theta(q, mu);
  return th;
}

inline PatchOperators build_patch_operators(
    const grid::MeshHierarchy& mesh, const interp::InterpolationOperator& ih,
    const coeff::SeparableCoefficient& c, int element, int k) {
  PatchOperators ops;
  ops.patch = grid::make_patch(mesh, element, k);
  ops.Q = c.Q();
  const grid::Patch& p = ops.patch;

  std::vector<int> patch_cells, t_cells;
  patch_cells.reserve(static_cast<std::size_t>(p.fi1 - p.fi0) * (p.fj1 - p.fj0));
  for (int cj = p.fj0; cj < p.fj1; ++cj)
    for (int ci = p.fi0; ci < p.fi1; ++ci)
      patch_cells.push_back(mesh.fine_cell_id(ci, cj));
  const auto [tx, ty] = mesh.coarse_element_xy(element);
  for (int lj = 0; lj < mesh.r; ++lj)
    for (int li = 0; li < mesh.r; ++li)
      t_cells.push_back(mesh.fine_cell_id(tx * mesh.r + li, ty * mesh.r + lj));

  auto all_map = [&p](int i, int j) { return p.all_index(i, j); };
  auto free_map = [&p](int i, int j) { return p.free_index(i, j); };

  for (int q = 0; q < ops.Q; ++q) {
    ops.A_free.push_back(fem::assemble_cells(mesh, patch_cells, c.fields[q],
                                             false, free_map, free_map,
                                             p.n_free, p.n_free));
    ops.A_all_free.push_back(fem::assemble_cells(mesh, patch_cells, c.fields[q],
                                                 false, all_map, free_map,
                                                 p.n_all, p.n_free));
  }
  ops.G_free = fem::assemble_cells(mesh, patch_cells,
                                   Vector::Ones(mesh.fine_cells()), false,
                                   free_map, free_map, p.n_free, p.n_free);
  ops.C = ih.patch_constraints(mesh, p);

  {
    std::vector<Triplet> t;
    for (int lc = 0; lc < p.m(); ++lc) {
      const auto [ci, cj] = p.coupled_xy[lc];
      for (int dj = -mesh.r; dj <= mesh.r; ++dj)
        for (int di = -mesh.r; di <= mesh.r; ++di) {
          const int idx = p.all_index(ci * mesh.r + di, cj * mesh.r + dj);
          if (idx < 0) continue;
          const double w = (1.0 - std::abs(di) / double(mesh.r)) *
                           (1.0 - std::abs(dj) / double(mesh.r));
          if (w > 0.0) t.emplace_back(idx, lc, w);
        }
    }
    ops.Phi.resize(p.n_all, p.m());
    ops.Phi.setFromTriplets(t.begin(), t.end());
    ops.Phi.makeCompressed();
  }

  for (int j = 0; j < p.J_T(); ++j) {
    const int pos = static_cast<int>(
        std::find(p.coupled_nodes.begin(), p.coupled_nodes.end(), p.t_nodes[j]) -
        p.coupled_nodes.begin());
    ops.t_in_coupled.push_back(pos);
  }

  ops.rhs_gen.assign(ops.Q, {});
  for (int q = 0; q < ops.Q; ++q) {
    SpMat S_T = fem::assemble_cells(mesh, t_cells, c.fields[q], false, free_map,
                                    all_map, p.n_free, p.n_all);
    for (int j = 0; j < p.J_T(); ++j)
      ops.rhs_gen[q].push_back(S_T * Vector(ops.Phi.col(ops.t_in_coupled[j])));
  }

  ops.K0.assign(ops.Q, Matrix::Zero(p.J_T(), p.J_T()));
  for (const int cell : t_cells) {
    const Matrix R = fem::coarse_restriction(mesh, cell);
    for (int q = 0; q < ops.Q; ++q) {
      const Matrix B = R.transpose() * (c.fields[q][cell] * fem::stiffness_ref()) * R;
      for (int j1 = 0; j1 < p.J_T(); ++j1)
        for (int j2 = 0; j2 < p.J_T(); ++j2)
          ops.K0[q](j1, j2) += B(p.t_node_corner[j1], p.t_node_corner[j2]);
    }
  }
  return ops;
}

// Right-hand side of the corrector problem for a coarse function with nodal
// values y on the element's interior corners.
inline Vector corrector_rhs(const PatchOperators& ops, const Vector& theta,
                            const Vector& y) {
  Vector rhs = Vector::Zero(ops.patch.n_free);
  for (int q = 0; q < ops.Q; ++q)
    for (int j = 0; j < ops.patch.J_T(); ++j)
      rhs += theta[q] * y[j] * ops.rhs_gen[q][j];
  return rhs;
}

// Holds the factored corrector KKT of one element for one parameter at a
// time; refactoring for a new parameter swaps values only.
class CorrectorSolver {
 public:
  explicit CorrectorSolver(const PatchOperators& ops) : ops_(&ops) {}

  void factor(const Vector& theta) {
    theta_ = theta;
    A_mu_ = combine_patterned(ops_->A_free, theta);
    A_all_mu_ = combine_patterned(ops_->A_all_free, theta);
    if (!has_pattern_) {
      kkt_.compute(A_mu_, ops_->C, "corrector patch system");
      has_pattern_ = true;
    } else {
      kkt_.refactor(A_mu_);
    }
  }

  Vector solve(const Vector& rhs) const { return kkt_.solve(rhs).x; }

  // Correctors of the element's own interior coarse hats, one per column.
  Matrix solve_basis() const {
    Matrix Qc(ops_->patch.n_free, ops_->patch.J_T());
    for (int j = 0; j < ops_->patch.J_T(); ++j) {
      Vector y = Vector::Zero(ops_->patch.J_T());
      y[j] = 1.0;
      Qc.col(j) = solve(corrector_rhs(*ops_, theta_, y));
    }
    return Qc;
  }

  // Corrector of a coarse function given by its values on the element's
  // interior corners.
  Vector solve_for(const Vector& y) const {
    return solve(corrector_rhs(*ops_, theta_, y));
  }

  const SpMat& A_mu() const { return A_mu_; }
  const SpMat& A_all_mu() const { return A_all_mu_; }
  const Vector& theta() const { return theta_; }

 private:
  const PatchOperators* ops_;
  Vector theta_;
  SpMat A_mu_, A_all_mu_;
  linalg::SaddleSolver kkt_;
  bool has_pattern_ = false;
};

// Localized multiscale stiffness contribution of one element: rows over the
// coupled coarse nodes, columns over the element's own interior corners.
inline Matrix assemble_K_T(const PatchOperators& ops, const CorrectorSolver& cs,
                           const Matrix& correctors) {
  const grid::Patch& p = ops.patch;
  Matrix K = -(ops.Phi.transpose() * (cs.A_all_mu() * correctors));
  Matrix K0mu = Matrix::Zero(p.J_T(), p.J_T());
  for (int q = 0; q < ops.Q; ++q) K0mu += cs.theta()[q] * ops.K0[q];
  for (int j1 = 0; j1 < p.J_T(); ++j1) K.row(ops.t_in_coupled[j1]) += K0mu.row(j1);
  return K;
}

inline void scatter_add(const grid::MeshHierarchy& mesh, const grid::Patch& p,
                        const Vector& local, Vector& global, double w = 1.0) {
  for (int l = 0; l < p.n_free; ++l) {
    const auto [fi, fj] = p.free_xy(l);
    global[mesh.fine_interior_id(fi, fj)] += w * local[l];
  }
}

struct PglodOptions {
  bool retain_correctors = false;
  int workers = 1;
};

struct PglodElementData {
  grid::Patch patch;
  Matrix correctors;  // free x J_T, empty unless retained
};

struct PglodSolution {
  Vector u_bar;  // coarse nodal solution
  std::vector<PglodElementData> elements;
};

// Solve the coarse system with the unsymmetric localized stiffness; the
// checked residual keeps the Petrov-Galerkin solve honest.
inline Vector solve_coarse_system(const SpMat& K, const Vector& F,
                                  const std::string& role) {
  Eigen::SparseLU<SpMat> lu;
  lu.compute(K);
  if (lu.info() != Eigen::Success)
    throw Error("factorization of '" + role + "' failed");
  Vector u = lu.solve(F);
  const double rel = (K * u - F).norm() / std::max(F.norm(), 1e-300);
  if (!(rel <= 1e-10))
    throw Error("solve of '" + role + "' missed residual contract");
  return u;
}

inline PglodSolution pglod_solve(const fem::Workspace& ws,
                                 const interp::InterpolationOperator& ih,
                                 const coeff::SeparableCoefficient& c,
                                 const Vector& mu, int k,
                                 const PglodOptions& opts = {}) {
  const grid::MeshHierarchy& mesh = ws.mesh;
  const Vector th = theta_vector(c, mu);
  const int nel = mesh.coarse_elements();
  std::vector<Matrix> blocks(nel);
  std::vector<grid::Patch> patches(nel);
  std::vector<Matrix> retained(nel);
  parallel_for(
      nel,
      [&](std::size_t e) {
        PatchOperators ops = build_patch_operators(mesh, ih, c, static_cast<int>(e), k);
        CorrectorSolver cs(ops);
        cs.factor(th);
        Matrix Qc = cs.solve_basis();
        blocks[e] = assemble_K_T(ops, cs, Qc);
        patches[e] = ops.patch;
        if (opts.retain_correctors) retained[e] = std::move(Qc);
      },
      opts.workers);

  std::vector<Triplet> t;
  for (int e = 0; e < nel; ++e) {
    const grid::Patch& p = patches[e];
    for (int j = 0; j < p.J_T(); ++j)
      for (int rloc = 0; rloc < p.m(); ++rloc)
        t.emplace_back(p.coupled_nodes[rloc], p.t_nodes[j], blocks[e](rloc, j));
  }
  SpMat K(mesh.coarse_dofs(), mesh.coarse_dofs());
  K.setFromTriplets(t.begin(), t.end());

  PglodSolution sol;
  sol.u_bar = solve_coarse_system(K, ws.F_coarse, "localized multiscale system");
  if (opts.retain_correctors) {
    sol.elements.resize(nel);
    for (int e = 0; e < nel; ++e)
      sol.elements[e] = {patches[e], std::move(retained[e])};
  }
  return sol;
}

// Multiscale reconstruction u_H - sum_T Q_T(u_H) on the fine mesh, from
// retained correctors.
inline Vector multiscale_reconstruction(const fem::Workspace& ws,
                                        const PglodSolution& sol) {
  if (sol.elements.empty())
    throw Error("reconstruction needs retained correctors");
  Vector x = ws.E * sol.u_bar;
  for (const auto& el : sol.elements)
    for (int j = 0; j < el.patch.J_T(); ++j)
      scatter_add(ws.mesh, el.patch, el.correctors.col(j), x,
                  -sol.u_bar[el.patch.t_nodes[j]]);
  return x;
}

// ---------------------------------------------------------------------------
// Two-scale reformulation.

struct TwoScaleVector {
  Vector uH;
  std::vector<Vector> fine;  // per element, patch-free coordinates

  TwoScaleVector() = default;
  TwoScaleVector(Vector u, std::vector<Vector> f)
      : uH(std::move(u)), fine(std::move(f)) {}
};

// Shared state for two-scale computations on one hierarchy: all patch
// operators plus the coefficient. Desk-scale verification only; production
// paths stream elements instead of holding them all.
struct TwoScaleContext {
  const fem::Workspace* ws = nullptr;
  const interp::InterpolationOperator* ih = nullptr;
  const coeff::SeparableCoefficient* c = nullptr;
  int k = 0;
  double rho = 1.0;
  std::vector<PatchOperators> ops;

  SpMat fine_stiffness(const Vector& mu) const {
    return fem::assemble_fine_matrix(ws->mesh, c->evaluate(mu), false);
  }
};

inline TwoScaleContext make_two_scale_context(
    const fem::Workspace& ws, const interp::InterpolationOperator& ih,
    const coeff::SeparableCoefficient& c, int k, double rho, int workers = 1) {
  TwoScaleContext ctx;
  ctx.ws = &ws;
  ctx.ih = &ih;
  ctx.c = &c;
  ctx.k = k;
  ctx.rho = rho;
  const int nel = ws.mesh.coarse_elements();
  ctx.ops.resize(nel);
  parallel_for(
      nel,
      [&](std::size_t e) {
        ctx.ops[e] = build_patch_operators(ws.mesh, ih, c, static_cast<int>(e), k);
      },
      workers);
  return ctx;
}

inline TwoScaleVector zero_two_scale(const TwoScaleContext& ctx) {
  TwoScaleVector v;
  v.uH = Vector::Zero(ctx.ws->mesh.coarse_dofs());
  for (const auto& o : ctx.ops) v.fine.emplace_back(Vector::Zero(o.patch.n_free));
  return v;
}

// Fine-mesh representative u_H - sum_T u_T of a two-scale vector.
inline Vector fine_representative(const TwoScaleContext& ctx,
                                  const TwoScaleVector& U) {
  Vector x = ctx.ws->E * U.uH;
  for (std::size_t e = 0; e < ctx.ops.size(); ++e)
    scatter_add(ctx.ws->mesh, ctx.ops[e].patch, U.fine[e], x, -1.0);
  return x;
}

inline Vector restrict_to_element(const grid::Patch& p, const Vector& uH) {
  Vector y(p.J_T());
  for (int j = 0; j < p.J_T(); ++j) y[j] = uH[p.t_nodes[j]];
  return y;
}

inline double two_scale_F(const TwoScaleContext& ctx, const TwoScaleVector& V) {
  return ctx.ws->F_coarse.dot(V.uH);
}

// B_mu(U, V) evaluated exactly from the patch operators; A_fine is the fine
// stiffness for the same parameter.
inline double two_scale_B(const TwoScaleContext& ctx, const Vector& mu,
                          const SpMat& A_fine, const TwoScaleVector& U,
                          const TwoScaleVector& V) {
  const Vector th = theta_vector(*ctx.c, mu);
  const Vector x = fine_representative(ctx, U);
  double value = (ctx.ws->E * V.uH).dot(A_fine * x);
  const double srho = std::sqrt(ctx.rho);
  for (std::size_t e = 0; e < ctx.ops.size(); ++e) {
    const PatchOperators& ops = ctx.ops[e];
    const SpMat A_mu = combine_patterned(ops.A_free, th);
    const Vector y = restrict_to_element(ops.patch, U.uH);
    value += srho * (U.fine[e].dot(A_mu * V.fine[e]) -
                     corrector_rhs(ops, th, y).dot(V.fine[e]));
  }
  return value;
}

// Verification solve of the full two-scale system, with the kernel
// constraints of every element appended. Solution equals (u_bar, {Q_T u_bar})
// and does not depend on rho > 0.
inline TwoScaleVector two_scale_solve_monolithic(const TwoScaleContext& ctx,
                                                 const Vector& mu) {
  if (!(ctx.rho > 0.0))
    throw Error("monolithic two-scale solve requires rho > 0");
  const fem::Workspace& ws = *ctx.ws;
  const grid::MeshHierarchy& mesh = ws.mesh;
  const Vector th = theta_vector(*ctx.c, mu);
  const double srho = std::sqrt(ctx.rho);
  const int nH = mesh.coarse_dofs();
  const int nel = mesh.coarse_elements();

  std::vector<int> off_fine(nel), off_lam(nel);
  int total = nH;
  for (int e = 0; e < nel; ++e) {
    off_fine[e] = total;
    total += ctx.ops[e].patch.n_free;
    off_lam[e] = total;
    total += ctx.ops[e].patch.m();
  }

  std::vector<Triplet> t;
  // Coarse rows: stiffness in the coarse basis with the fine coefficient.
  {
    const Vector a = ctx.c->evaluate(mu);
    for (int cell = 0; cell < mesh.fine_cells(); ++cell) {
      const int ci = cell % mesh.n_h, cj = cell / mesh.n_h;
      const int ti = ci / mesh.r, tj = cj / mesh.r;
      const Matrix R = fem::coarse_restriction(mesh, cell);
      const Matrix B = R.transpose() * (a[cell] * fem::stiffness_ref()) * R;
      int ids[4];
      for (int cr = 0; cr < 4; ++cr)
        ids[cr] = mesh.coarse_interior_id(ti + grid::kCorner[cr][0],
                                          tj + grid::kCorner[cr][1]);
      for (int a1 = 0; a1 < 4; ++a1) {
        if (ids[a1] < 0) continue;
        for (int a2 = 0; a2 < 4; ++a2)
          if (ids[a2] >= 0) t.emplace_back(ids[a1], ids[a2], B(a1, a2));
      }
    }
  }
  for (int e = 0; e < nel; ++e) {
    const PatchOperators& ops = ctx.ops[e];
    const grid::Patch& p = ops.patch;
    const SpMat A_mu = combine_patterned(ops.A_free, th);
    const SpMat A_all = combine_patterned(ops.A_all_free, th);
    // Coarse tests against the element's fine-scale block.
    SpMat V = SpMat(ops.Phi.transpose()) * A_all;  // m x free
    for (int outer = 0; outer < V.outerSize(); ++outer)
      for (SpMat::InnerIterator it(V, outer); it; ++it)
        t.emplace_back(p.coupled_nodes[it.row()], off_fine[e] + static_cast<int>(it.col()),
                       -it.value());
    // Fine-scale rows: sqrt(rho) (a_mu(u_T, .) - a^T_mu(u_H, .)) + constraints.
    for (int outer = 0; outer < A_mu.outerSize(); ++outer)
      for (SpMat::InnerIterator it(A_mu, outer); it; ++it)
        t.emplace_back(off_fine[e] + static_cast<int>(it.row()),
                       off_fine[e] + static_cast<int>(it.col()), srho * it.value());
    for (int q = 0; q < ops.Q; ++q)
      for (int j = 0; j < p.J_T(); ++j) {
        const Vector& g = ops.rhs_gen[q][j];
        for (int i = 0; i < g.size(); ++i)
          if (g[i] != 0.0)
            t.emplace_back(off_fine[e] + i, p.t_nodes[j], -srho * th[q] * g[i]);
      }
    for (int outer = 0; outer < ops.C.outerSize(); ++outer)
      for (SpMat::InnerIterator it(ops.C, outer); it; ++it) {
        t.emplace_back(off_lam[e] + static_cast<int>(it.row()),
                       off_fine[e] + static_cast<int>(it.col()), it.value());
        t.emplace_back(off_fine[e] + static_cast<int>(it.col()),
                       off_lam[e] + static_cast<int>(it.row()), it.value());
      }
  }
  SpMat Kbig(total, total);
  Kbig.setFromTriplets(t.begin(), t.end());
  Kbig.makeCompressed();
  Vector rhs = Vector::Zero(total);
  rhs.head(nH) = ws.F_coarse;

  Eigen::UmfPackLU<SpMat> lu;
  lu.compute(Kbig);
  if (lu.info() != Eigen::Success)
    throw Error("two-scale monolithic factorization failed");
  Vector z = lu.solve(rhs);
  const double rel = (Kbig * z - rhs).norm() / std::max(rhs.norm(), 1e-300);
  if (!(rel <= 1e-9))
    throw Error("two-scale monolithic solve missed residual contract");

  TwoScaleVector sol;
  sol.uH = z.head(nH);
  for (int e = 0; e < nel; ++e)
    sol.fine.push_back(z.segment(off_fine[e], ctx.ops[e].patch.n_free));
  return sol;
}

struct TwoScaleNorms {
  double s = 0;  // reference norm: coarse H1 seminorm + fine-block seminorms
  double a = 0;  // energy norm of the two-scale form
  double m = 0;  // corrector-mismatch norm
};

// All three norms of a two-scale vector. The a- and m-norms compare the fine
// blocks against the true correctors of the coarse part, which are solved
// here per element; pass precomputed correctors to skip that.
inline TwoScaleNorms two_scale_norms(
    const TwoScaleContext& ctx, const Vector& mu, const TwoScaleVector& U,
    const std::vector<Vector>* true_correctors = nullptr) {
  const fem::Workspace& ws = *ctx.ws;
  const Vector th = theta_vector(*ctx.c, mu);
  TwoScaleNorms out;
  double s2 = ws.mesh.coarse_dofs() > 0 ? U.uH.dot(ws.S_coarse * U.uH) : 0.0;
  const double uH_h1 = s2;
  for (std::size_t e = 0; e < ctx.ops.size(); ++e)
    s2 += U.fine[e].dot(ctx.ops[e].G_free * U.fine[e]);
  out.s = std::sqrt(std::max(0.0, s2));

  const SpMat A_fine = ctx.fine_stiffness(mu);
  const Vector x = fine_representative(ctx, U);
  double a2 = x.dot(A_fine * x);
  double m2 = uH_h1;
  for (std::size_t e = 0; e < ctx.ops.size(); ++e) {
    const PatchOperators& ops = ctx.ops[e];
    Vector qT;
    if (true_correctors) {
      qT = (*true_correctors)[e];
    } else {
      CorrectorSolver cs(ops);
      cs.factor(th);
      qT = cs.solve_for(restrict_to_element(ops.patch, U.uH));
    }
    const Vector d = qT - U.fine[e];
    const SpMat A_mu = combine_patterned(ops.A_free, th);
    a2 += ctx.rho * d.dot(A_mu * d);
    m2 += ctx.rho * d.dot(ops.G_free * d);
  }
  out.a = std::sqrt(std::max(0.0, a2));
  out.m = std::sqrt(std::max(0.0, m2));
  return out;
}

}  // namespace tslod::lod
