#pragma once

// Q1 finite elements on the structured meshes. A 2x2 Gauss rule is exact for
// bilinear gradients against cellwise-constant coefficients, which makes the
// closed-form element matrices below exact as well. Dirichlet conditions are
// imposed by eliminating boundary rows and columns, never by penalties.

#include <functional>

#include "tslod/coeff.hpp"
#include "tslod/common.hpp"
#include "tslod/grid.hpp"
#include "tslod/linalg.hpp"

namespace tslod::fem {

// Element stiffness for a unit-coefficient bilinear quad; scale invariant in
// 2D. Corner order (0,0),(1,0),(1,1),(0,1): diagonal 2/3, edge neighbors
// -1/6, opposite corners -1/3.
inline const Matrix& stiffness_ref() {
  static const Matrix K = [] {
    Matrix K(4, 4);
    K << 4, -1, -2, -1,
        -1, 4, -1, -2,
        -2, -1, 4, -1,
        -1, -2, -1, 4;
    return Matrix(K / 6.0);
  }();
  return K;
}

// Element mass for a unit square, to be scaled by the cell area.
inline const Matrix& mass_ref() {
  static const Matrix M = [] {
    Matrix M(4, 4);
    M << 4, 2, 1, 2,
        2, 4, 2, 1,
        1, 2, 4, 2,
        2, 1, 2, 4;
    return Matrix(M / 36.0);
  }();
  return M;
}

// Values of the containing coarse element's four bilinear basis functions at
// the corners of a fine cell: R(r, a) = Phi_a(corner r). Exact because the
// meshes are nested.
inline Matrix coarse_restriction(const grid::MeshHierarchy& mesh, int cell) {
  const int i = cell % mesh.n_h, j = cell / mesh.n_h;
  const int r = mesh.r;
  const int li = i % r, lj = j % r;  // cell position inside its coarse element
  Matrix R(4, 4);
  for (int c = 0; c < 4; ++c) {
    const double u = static_cast<double>(li + grid::kCorner[c][0]) / r;
    const double v = static_cast<double>(lj + grid::kCorner[c][1]) / r;
    R(c, 0) = (1 - u) * (1 - v);
    R(c, 1) = u * (1 - v);
    R(c, 2) = u * v;
    R(c, 3) = (1 - u) * v;
  }
  return R;
}

// Assembly over an explicit cell list with caller-provided node->index maps;
// map returns -1 for eliminated or out-of-range nodes. Covers global and
// patch-local stiffness and mass in one routine.
template <class CellRange, class RowMap, class ColMap>
SpMat assemble_cells(const grid::MeshHierarchy& mesh, const CellRange& cells,
                     const Vector& cell_values, bool mass, RowMap&& row_of,
                     ColMap&& col_of, int nrows, int ncols) {
  const Matrix& ref = mass ? mass_ref() : stiffness_ref();
  const double scale0 = mass ? mesh.h * mesh.h : 1.0;
  std::vector<Triplet> t;
  t.reserve(static_cast<std::size_t>(std::size(cells)) * 16);
  for (const int c : cells) {
    const int i = c % mesh.n_h, j = c / mesh.n_h;
    const double s = scale0 * cell_values[c];
    int rows[4], cols[4];
    for (int a = 0; a < 4; ++a) {
      const int ni = i + grid::kCorner[a][0], nj = j + grid::kCorner[a][1];
      rows[a] = row_of(ni, nj);
      cols[a] = col_of(ni, nj);
    }
    for (int a = 0; a < 4; ++a) {
      if (rows[a] < 0) continue;
      for (int b = 0; b < 4; ++b) {
        if (cols[b] < 0) continue;
        t.emplace_back(rows[a], cols[b], s * ref(a, b));
      }
    }
  }
  SpMat A(nrows, ncols);
  A.setFromTriplets(t.begin(), t.end());
  A.makeCompressed();
  return A;
}

struct AllCells {
  int n = 0;
  struct It {
    int c;
    int operator*() const { return c; }
    It& operator++() { ++c; return *this; }
    bool operator!=(const It& o) const { return c != o.c; }
  };
  It begin() const { return {0}; }
  It end() const { return {n}; }
  int size() const { return n; }
};

inline SpMat assemble_fine_matrix(const grid::MeshHierarchy& mesh,
                                  const Vector& cell_values, bool mass = false) {
  auto id = [&mesh](int i, int j) { return mesh.fine_interior_id(i, j); };
  return assemble_cells(mesh, AllCells{mesh.fine_cells()}, cell_values, mass, id,
                        id, mesh.fine_dofs(), mesh.fine_dofs());
}

// Coarse-mesh matrices with unit coefficient, assembled directly at the
// coarse level (exact, the spaces are nested).
inline SpMat assemble_coarse_unit_matrix(const grid::MeshHierarchy& mesh,
                                         bool mass = false) {
  const Matrix& ref = mass ? mass_ref() : stiffness_ref();
  const double s = mass ? mesh.H * mesh.H : 1.0;
  std::vector<Triplet> t;
  t.reserve(static_cast<std::size_t>(mesh.coarse_elements()) * 16);
  for (int e = 0; e < mesh.coarse_elements(); ++e) {
    const auto [ti, tj] = mesh.coarse_element_xy(e);
    int ids[4];
    for (int a = 0; a < 4; ++a)
      ids[a] = mesh.coarse_interior_id(ti + grid::kCorner[a][0],
                                       tj + grid::kCorner[a][1]);
    for (int a = 0; a < 4; ++a) {
      if (ids[a] < 0) continue;
      for (int b = 0; b < 4; ++b)
        if (ids[b] >= 0) t.emplace_back(ids[a], ids[b], s * ref(a, b));
    }
  }
  SpMat A(mesh.coarse_dofs(), mesh.coarse_dofs());
  A.setFromTriplets(t.begin(), t.end());
  A.makeCompressed();
  return A;
}

// Load vector for f == 1: each cell contributes a quarter of its area to
// each corner, so interior fine nodes receive h^2 and interior coarse nodes
// H^2.
inline Vector fine_unit_load(const grid::MeshHierarchy& mesh) {
  Vector F = Vector::Zero(mesh.fine_dofs());
  const double w = mesh.h * mesh.h / 4.0;
  for (int c = 0; c < mesh.fine_cells(); ++c) {
    const int i = c % mesh.n_h, j = c / mesh.n_h;
    for (int a = 0; a < 4; ++a) {
      const int id = mesh.fine_interior_id(i + grid::kCorner[a][0],
                                           j + grid::kCorner[a][1]);
      if (id >= 0) F[id] += w;
    }
  }
  return F;
}

// Bilinear embedding of the coarse space into the fine space, interior
// degrees of freedom on both sides. Interior coarse hats vanish on the
// domain boundary, so no boundary columns are lost.
inline SpMat coarse_embedding(const grid::MeshHierarchy& mesh) {
  std::vector<Triplet> t;
  const int r = mesh.r;
  for (int cj = 1; cj <= mesh.n_H - 1; ++cj)
    for (int ci = 1; ci <= mesh.n_H - 1; ++ci) {
      const int col = mesh.coarse_interior_id(ci, cj);
      for (int dj = -r; dj <= r; ++dj)
        for (int di = -r; di <= r; ++di) {
          const int fi = ci * r + di, fj = cj * r + dj;
          const int row = mesh.fine_interior_id(fi, fj);
          if (row < 0) continue;
          const double w = (1.0 - std::abs(di) / double(r)) *
                           (1.0 - std::abs(dj) / double(r));
          if (w > 0.0) t.emplace_back(row, col, w);
        }
    }
  SpMat E(mesh.fine_dofs(), mesh.coarse_dofs());
  E.setFromTriplets(t.begin(), t.end());
  E.makeCompressed();
  return E;
}

// Everything solvers and error metrics repeatedly need for one hierarchy.
struct Workspace {
  grid::MeshHierarchy mesh;
  SpMat G_fine;    // fine H1 seminorm Gram (unit stiffness)
  SpMat M_fine;    // fine mass
  SpMat S_coarse;  // coarse H1 seminorm Gram
  SpMat M_coarse;  // coarse mass
  SpMat E;         // coarse -> fine embedding
  Vector F_fine;   // unit load, fine
  Vector F_coarse; // unit load, coarse
};

inline Workspace make_workspace(const grid::MeshHierarchy& mesh) {
  Workspace w;
  w.mesh = mesh;
  w.G_fine = assemble_fine_matrix(mesh, Vector::Ones(mesh.fine_cells()), false);
  w.M_fine = assemble_fine_matrix(mesh, Vector::Ones(mesh.fine_cells()), true);
  w.S_coarse = assemble_coarse_unit_matrix(mesh, false);
  w.M_coarse = assemble_coarse_unit_matrix(mesh, true);
  w.E = coarse_embedding(mesh);
  w.F_fine = fine_unit_load(mesh);
  w.F_coarse = w.E.transpose() * w.F_fine;
  return w;
}

inline double h1_seminorm(const Workspace& w, const Vector& fine) {
  return std::sqrt(std::max(0.0, fine.dot(w.G_fine * fine)));
}
inline double l2_norm(const Workspace& w, const Vector& fine) {
  return std::sqrt(std::max(0.0, fine.dot(w.M_fine * fine)));
}
inline double coarse_h1_seminorm(const Workspace& w, const Vector& u) {
  return std::sqrt(std::max(0.0, u.dot(w.S_coarse * u)));
}
inline double coarse_l2_norm(const Workspace& w, const Vector& u) {
  return std::sqrt(std::max(0.0, u.dot(w.M_coarse * u)));
}

// Fine-mesh Galerkin solve for A_mu, the reference every error is measured
// against.
inline Vector fem_reference_solve(const Workspace& w,
                                  const coeff::SeparableCoefficient& c,
                                  const Vector& mu) {
  SpMat A = assemble_fine_matrix(w.mesh, c.evaluate(mu), false);
  return linalg::solve_spd_sparse(A, w.F_fine, "fine stiffness");
}

}  // namespace tslod::fem
