#pragma once

// Two-level structured quad meshes on the unit square with homogeneous
// Dirichlet boundary. The coarse mesh (n_H x n_H elements) is nested in the
// fine mesh (n_h x n_h cells, n_H | n_h). Element patches are axis-aligned
// boxes of coarse elements clipped at the boundary; on this mesh family the
// k-fold patch of an element is exactly the (2k+1) x (2k+1) block around it.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "tslod/common.hpp"

namespace tslod::grid {

// Oversampling layers from the coarse mesh width: smallest integer strictly
// greater than |ln H|.
inline int choose_oversampling(double H) {
  if (!(H > 0.0) || !(H < 1.0)) throw Error("choose_oversampling: H must be in (0,1)");
  const double x = std::abs(std::log(H));
  return static_cast<int>(std::floor(x)) + 1;
}

// Number of coarse elements a (2k+1)-wide patch can overlap.
inline double overlap_constant(int k) {
  const double w = 2.0 * k + 1.0;
  return w * w;
}

struct MeshHierarchy {
  int n_h = 0;   // fine cells per side
  int n_H = 0;   // coarse elements per side
  int r = 0;     // refinement ratio n_h / n_H
  double h = 0, H = 0;

  MeshHierarchy() = default;
  MeshHierarchy(int fine, int coarse) : n_h(fine), n_H(coarse) {
    if (coarse < 2 || fine < coarse)
      throw Error("mesh hierarchy: need 2 <= n_H <= n_h");
    if (fine % coarse != 0)
      throw Error("mesh hierarchy: n_h = " + std::to_string(fine) +
                  " not divisible by n_H = " + std::to_string(coarse));
    r = fine / coarse;
    h = 1.0 / fine;
    H = 1.0 / coarse;
  }

  // Interior (free) node counts; boundary nodes carry the Dirichlet data.
  int fine_dofs() const { return (n_h - 1) * (n_h - 1); }
  int coarse_dofs() const { return (n_H - 1) * (n_H - 1); }
  int fine_cells() const { return n_h * n_h; }
  int coarse_elements() const { return n_H * n_H; }

  // Grid-index helpers. "int" coordinates run over node columns/rows.
  int fine_interior_id(int i, int j) const {
    if (i < 1 || i > n_h - 1 || j < 1 || j > n_h - 1) return -1;
    return (j - 1) * (n_h - 1) + (i - 1);
  }
  int coarse_interior_id(int i, int j) const {
    if (i < 1 || i > n_H - 1 || j < 1 || j > n_H - 1) return -1;
    return (j - 1) * (n_H - 1) + (i - 1);
  }
  int fine_cell_id(int i, int j) const { return j * n_h + i; }
  int coarse_element_id(int i, int j) const { return j * n_H + i; }
  std::array<int, 2> coarse_element_xy(int t) const { return {t % n_H, t / n_H}; }

  std::array<double, 2> fine_node_xy(int i, int j) const { return {i * h, j * h}; }
  std::array<double, 2> fine_cell_center(int c) const {
    const int i = c % n_h, j = c / n_h;
    return {(i + 0.5) * h, (j + 0.5) * h};
  }
};

// Corner order used everywhere for quads: (0,0), (1,0), (1,1), (0,1).
constexpr std::array<std::array<int, 2>, 4> kCorner = {{{0, 0}, {1, 0}, {1, 1}, {0, 1}}};

struct Patch {
  int element = -1;  // coarse element this patch surrounds
  int k = 0;
  int ci0 = 0, ci1 = 0, cj0 = 0, cj1 = 0;  // coarse-element box, inclusive

  // Fine-node index ranges: all patch nodes (closed box) and free nodes
  // (strictly interior to the patch, which also excludes the domain boundary).
  int fi0 = 0, fi1 = 0, fj0 = 0, fj1 = 0;  // all-node range
  int nx_all = 0, ny_all = 0;
  int n_all = 0;
  int n_free = 0;

  // Interior coarse corner nodes of the element itself, in corner order;
  // these index the coarse basis functions the element contributes to.
  std::vector<int> t_nodes;          // global coarse interior ids, size J_T
  std::vector<int> t_node_corner;    // which corner (0..3) each entry is

  // Interior coarse nodes whose basis support meets the patch: the rows of
  // the interpolation operator constrained to zero on the patch, and equally
  // the coarse test functions coupled to the patch in the stiffness.
  std::vector<int> coupled_nodes;               // global coarse interior ids
  std::vector<std::array<int, 2>> coupled_xy;   // coarse grid coords

  int J_T() const { return static_cast<int>(t_nodes.size()); }
  int m() const { return static_cast<int>(coupled_nodes.size()); }

  int all_index(int fi, int fj) const {
    if (fi < fi0 || fi > fi1 || fj < fj0 || fj > fj1) return -1;
    return (fj - fj0) * nx_all + (fi - fi0);
  }
  // Free nodes are the all-nodes minus the box hull; local ordering row-major
  // over the open range.
  int free_index(int fi, int fj) const {
    if (fi <= fi0 || fi >= fi1 || fj <= fj0 || fj >= fj1) return -1;
    return (fj - fj0 - 1) * (nx_all - 2) + (fi - fi0 - 1);
  }
  std::array<int, 2> free_xy(int local) const {
    const int w = nx_all - 2;
    return {fi0 + 1 + local % w, fj0 + 1 + local / w};
  }
};

inline Patch make_patch(const MeshHierarchy& mesh, int element, int k) {
  if (element < 0 || element >= mesh.coarse_elements())
    throw Error("make_patch: element out of range");
  if (k < 0) throw Error("make_patch: k must be nonnegative");
  Patch p;
  p.element = element;
  p.k = k;
  const auto [tx, ty] = mesh.coarse_element_xy(element);
  p.ci0 = std::max(0, tx - k);
  p.ci1 = std::min(mesh.n_H - 1, tx + k);
  p.cj0 = std::max(0, ty - k);
  p.cj1 = std::min(mesh.n_H - 1, ty + k);
  p.fi0 = p.ci0 * mesh.r;
  p.fi1 = (p.ci1 + 1) * mesh.r;
  p.fj0 = p.cj0 * mesh.r;
  p.fj1 = (p.cj1 + 1) * mesh.r;
  p.nx_all = p.fi1 - p.fi0 + 1;
  p.ny_all = p.fj1 - p.fj0 + 1;
  p.n_all = p.nx_all * p.ny_all;
  p.n_free = (p.nx_all - 2) * (p.ny_all - 2);

  for (int c = 0; c < 4; ++c) {
    const int ci = tx + kCorner[c][0], cj = ty + kCorner[c][1];
    const int id = mesh.coarse_interior_id(ci, cj);
    if (id >= 0) {
      p.t_nodes.push_back(id);
      p.t_node_corner.push_back(c);
    }
  }
  for (int cj = std::max(1, p.cj0); cj <= std::min(mesh.n_H - 1, p.cj1 + 1); ++cj)
    for (int ci = std::max(1, p.ci0); ci <= std::min(mesh.n_H - 1, p.ci1 + 1); ++ci) {
      p.coupled_nodes.push_back(mesh.coarse_interior_id(ci, cj));
      p.coupled_xy.push_back({ci, cj});
    }
  return p;
}

}  // namespace tslod::grid
