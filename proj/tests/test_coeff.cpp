#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace tslod;

TEST_CASE("parameter box sampling stays inside and reproduces") {
  coeff::ParameterBox box;
  box.lo = Vector::Constant(3, -1.0);
  box.hi = Vector::Constant(3, 2.0);
  const auto a = box.random_set(20, 99, 1);
  const auto b = box.random_set(20, 99, 1);
  for (int i = 0; i < 20; ++i) {
    REQUIRE(support::same_dense(a[i], b[i]));
    for (int d = 0; d < 3; ++d) {
      REQUIRE(a[i][d] >= -1.0);
      REQUIRE(a[i][d] <= 2.0);
    }
  }
}

TEST_CASE("equidistant set hits both endpoints uniformly") {
  coeff::ParameterBox box;
  box.lo = Vector::Constant(1, 0.0);
  box.hi = Vector::Constant(1, 5.0);
  const auto ps = box.equidistant(11);
  REQUIRE(ps.front()[0] == Catch::Approx(0.0).margin(1e-15));
  REQUIRE(ps.back()[0] == Catch::Approx(5.0).margin(1e-15));
  for (int i = 1; i < 11; ++i)
    REQUIRE(ps[i][0] - ps[i - 1][0] == Catch::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("equidistant set rejects degenerate requests") {
  coeff::ParameterBox box1;
  box1.lo = Vector::Constant(1, 0.0);
  box1.hi = Vector::Constant(1, 5.0);
  REQUIRE_THROWS_AS(box1.equidistant(1), Error);
  coeff::ParameterBox box2;
  box2.lo = Vector::Constant(2, 0.0);
  box2.hi = Vector::Constant(2, 5.0);
  REQUIRE_THROWS_AS(box2.equidistant(4), Error);
}

TEST_CASE("theta functionals implement the two supported forms") {
  coeff::Theta one{coeff::Theta::Kind::One, 0};
  coeff::Theta comp{coeff::Theta::Kind::Component, 1};
  Vector mu(2);
  mu << 3.0, 4.5;
  REQUIRE(one(mu) == 1.0);
  REQUIRE(comp(mu) == 4.5);
}

TEST_CASE("separable coefficient evaluates its affine combination") {
  coeff::Problem p = coeff::make_problem("tc1_analog", 32, 4, 7);
  REQUIRE(p.coefficient.Q() == 2);
  Vector mu(1);
  mu << 2.5;
  const Vector a = p.coefficient.evaluate(mu);
  const Vector manual =
      p.coefficient.fields[0] + 2.5 * p.coefficient.fields[1];
  REQUIRE((a - manual).norm() == 0.0);
  REQUIRE(a.minCoeff() > 0.0);
}

TEST_CASE("spectral bounds match a hand-computable coefficient") {
  coeff::Problem p = coeff::make_problem("constant", 8, 4, 7);
  Vector mu(1);
  mu << 1.0;
  const auto b = coeff::exact_bounds(p.coefficient, mu);
  REQUIRE(b.alpha == Catch::Approx(1.0));
  REQUIRE(b.beta == Catch::Approx(1.0));
  REQUIRE(b.kappa == Catch::Approx(1.0));

  coeff::Problem tb = coeff::make_problem("thermal_block", 16, 4, 7);
  Vector nu(4);
  nu << 0.5, 2.0, 1.0, 4.0;
  const auto bb = coeff::exact_bounds(tb.coefficient, nu);
  REQUIRE(bb.alpha == Catch::Approx(0.5));
  REQUIRE(bb.beta == Catch::Approx(4.0));
  REQUIRE(bb.kappa == Catch::Approx(8.0));
}

TEST_CASE("set bounds take extremes over the parameter collection") {
  coeff::Problem p = coeff::make_problem("tc1_analog", 32, 4, 7);
  std::vector<Vector> ps;
  for (double v : {0.0, 2.5, 5.0}) {
    Vector mu(1);
    mu << v;
    ps.push_back(mu);
  }
  const auto all = coeff::estimate_spectral_bounds(p.coefficient, ps);
  for (const Vector& mu : ps) {
    const auto one = coeff::exact_bounds(p.coefficient, mu);
    REQUIRE(all.alpha <= one.alpha + 1e-15);
    REQUIRE(all.beta >= one.beta - 1e-15);
  }
  REQUIRE(all.kappa == Catch::Approx(all.beta / all.alpha));
}

TEST_CASE("problem coefficients are strictly positive across the box") {
  for (const char* name : {"tc1_analog", "tc2_analog", "thermal_block"}) {
    coeff::Problem p = coeff::make_problem(name, 32, 4, 7);
    auto rng = make_rng(31, 0);
    for (int t = 0; t < 20; ++t) {
      const Vector mu = p.box.sample(rng);
      REQUIRE(p.coefficient.evaluate(mu).minCoeff() > 0.0);
    }
  }
}

TEST_CASE("unknown problem names are rejected") {
  REQUIRE_THROWS_AS(coeff::make_problem("no_such_problem", 16, 4, 7), Error);
}
