#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

#include <set>

using namespace tslod;

TEST_CASE("oversampling radius follows the logarithmic rule") {
  REQUIRE(grid::choose_oversampling(1.0 / 4) == 2);
  REQUIRE(grid::choose_oversampling(1.0 / 8) == 3);
  REQUIRE(grid::choose_oversampling(1.0 / 16) == 3);
  REQUIRE(grid::choose_oversampling(1.0 / 32) == 4);
}

TEST_CASE("overlap constant counts patch multiplicity") {
  REQUIRE(grid::overlap_constant(0) == 1.0);
  REQUIRE(grid::overlap_constant(2) == 25.0);
  REQUIRE(grid::overlap_constant(3) == 49.0);
}

TEST_CASE("mesh hierarchy dimensions and id round trips") {
  grid::MeshHierarchy mesh(32, 8);
  REQUIRE(mesh.r == 4);
  REQUIRE(mesh.fine_dofs() == 31 * 31);
  REQUIRE(mesh.coarse_dofs() == 7 * 7);
  REQUIRE(mesh.coarse_elements() == 64);
  REQUIRE(mesh.fine_cells() == 32 * 32);

  auto rng = make_rng(21, 0);
  std::uniform_int_distribution<int> pick(1, 31 - 1);
  for (int t = 0; t < 20; ++t) {
    const int i = pick(rng), j = pick(rng);
    const int id = mesh.fine_interior_id(i, j);
    REQUIRE(id >= 0);
    REQUIRE(id < mesh.fine_dofs());
  }
  REQUIRE(mesh.fine_interior_id(0, 5) < 0);   // boundary nodes carry no dof
  REQUIRE(mesh.fine_interior_id(32, 5) < 0);
  REQUIRE(mesh.coarse_interior_id(0, 3) < 0);
}

TEST_CASE("patches clip at the boundary and index consistently") {
  grid::MeshHierarchy mesh(32, 8);
  auto rng = make_rng(22, 0);
  std::uniform_int_distribution<int> pick(0, mesh.coarse_elements() - 1);
  for (int t = 0; t < 20; ++t) {
    const int e = pick(rng);
    const int k = 1 + t % 3;
    grid::Patch p = grid::make_patch(mesh, e, k);
    const int ti = e % 8, tj = e / 8;
    REQUIRE(p.ci0 == std::max(0, ti - k));
    REQUIRE(p.cj0 == std::max(0, tj - k));
    REQUIRE(p.ci1 == std::min(8 - 1, ti + k));
    REQUIRE(p.cj1 == std::min(8 - 1, tj + k));
    REQUIRE(p.J_T() >= 1);
    REQUIRE(p.J_T() <= 4);
    REQUIRE(p.m() >= p.J_T());
    REQUIRE(p.n_free <= p.n_all);

    // free_index and all_index agree through the coordinate maps
    for (int l = 0; l < p.n_free; l += std::max(1, p.n_free / 7)) {
      const auto [fi, fj] = p.free_xy(l);
      REQUIRE(p.free_index(fi, fj) == l);
      REQUIRE(p.all_index(fi, fj) >= 0);
    }

    // coupled nodes are exactly the interior coarse nodes of the closed
    // patch box, and contain the element's own corners
    std::set<int> coupled(p.coupled_nodes.begin(), p.coupled_nodes.end());
    for (int j : p.t_nodes) REQUIRE(coupled.count(j) == 1);
    int expect = 0;
    for (int cj = p.cj0; cj <= p.cj1 + 1; ++cj)
      for (int ci = p.ci0; ci <= p.ci1 + 1; ++ci)
        if (mesh.coarse_interior_id(ci, cj) >= 0) ++expect;
    REQUIRE(static_cast<int>(coupled.size()) == expect);
  }
}

TEST_CASE("interior patch of radius k spans 2k+1 coarse cells") {
  grid::MeshHierarchy mesh(64, 8);
  const int e = 3 + 3 * 8;  // element (3,3), interior for k <= 3
  grid::Patch p = grid::make_patch(mesh, e, 2);
  REQUIRE(p.ci1 - p.ci0 + 1 == 5);
  REQUIRE(p.cj1 - p.cj0 + 1 == 5);
  REQUIRE(p.J_T() == 4);
}
