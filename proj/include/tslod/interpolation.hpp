#pragma once

// Quasi-interpolation from the fine space onto the coarse space: elementwise
// L2 projection onto Q1 followed by arithmetic averaging of the projected
// corner values over the four elements meeting at each interior coarse node.
// Rows for boundary coarse nodes are dropped (homogeneous Dirichlet). The
// operator is linear, local, H1-bounded, and reproduces coarse functions
// exactly, which the tests pin down; its kernel is the fine-scale space the
// correctors live in.

#include "tslod/common.hpp"
#include "tslod/fem.hpp"
#include "tslod/grid.hpp"

namespace tslod::interp {

struct InterpolationOperator {
  SpMat I;  // coarse_dofs x fine_dofs
  Eigen::SparseMatrix<double, Eigen::RowMajor> I_rows;  // row access copy

  Vector apply(const Vector& fine) const { return I * fine; }

  // Constraint matrix of a patch: rows are the interior coarse nodes whose
  // interpolation stencil meets the patch, columns the patch-interior fine
  // nodes. A fine-scale function supported on the patch lies in ker(I_H)
  // iff these rows vanish on it.
  SpMat patch_constraints(const grid::MeshHierarchy& mesh,
                          const grid::Patch& p) const {
    std::vector<Triplet> t;
    for (int lr = 0; lr < p.m(); ++lr) {
      const int row = p.coupled_nodes[lr];
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(
               I_rows, row);
           it; ++it) {
        const int fcol = static_cast<int>(it.col());
        const int fi = fcol % (mesh.n_h - 1) + 1;
        const int fj = fcol / (mesh.n_h - 1) + 1;
        const int lc = p.free_index(fi, fj);
        if (lc >= 0) t.emplace_back(lr, lc, it.value());
      }
    }
    SpMat C(p.m(), p.n_free);
    C.setFromTriplets(t.begin(), t.end());
    C.makeCompressed();
    return C;
  }
};

inline InterpolationOperator make_interpolation(const grid::MeshHierarchy& mesh) {
  const Matrix Minv =
      (fem::mass_ref() * (mesh.H * mesh.H)).inverse();  // coarse element mass
  const Matrix Mcell = fem::mass_ref() * (mesh.h * mesh.h);
  std::vector<Triplet> t;
  for (int e = 0; e < mesh.coarse_elements(); ++e) {
    const auto [ti, tj] = mesh.coarse_element_xy(e);
    int corner_rows[4];
    for (int a = 0; a < 4; ++a)
      corner_rows[a] = mesh.coarse_interior_id(ti + grid::kCorner[a][0],
                                               tj + grid::kCorner[a][1]);
    for (int lj = 0; lj < mesh.r; ++lj)
      for (int li = 0; li < mesh.r; ++li) {
        const int ci = ti * mesh.r + li, cj = tj * mesh.r + lj;
        const int cell = mesh.fine_cell_id(ci, cj);
        // V(p, a) = value the fine node p of this cell contributes to the
        // projected corner value a; the quarter weight is the node average.
        const Matrix V = Mcell * fem::coarse_restriction(mesh, cell) * Minv;
        for (int a = 0; a < 4; ++a) {
          if (corner_rows[a] < 0) continue;
          for (int pl = 0; pl < 4; ++pl) {
            const int col = mesh.fine_interior_id(ci + grid::kCorner[pl][0],
                                                  cj + grid::kCorner[pl][1]);
            if (col >= 0) t.emplace_back(corner_rows[a], col, 0.25 * V(pl, a));
          }
        }
      }
  }
  InterpolationOperator op;
  op.I.resize(mesh.coarse_dofs(), mesh.fine_dofs());
  op.I.setFromTriplets(t.begin(), t.end());
  op.I.makeCompressed();
  op.I_rows = op.I;
  return op;
}

}  // namespace tslod::interp
