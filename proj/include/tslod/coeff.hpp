#pragma once

// Parameterized diffusion fields, separable in the parameter:
//   A_mu(x) = sum_q theta_q(mu) A_q(x),
// with each A_q piecewise constant on the fine cells. Problems are built by
// name; randomized microstructure is seeded per fine cell or per coarse
// element so a field never depends on evaluation order or thread count.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "tslod/common.hpp"
#include "tslod/grid.hpp"

namespace tslod::coeff {

struct ParameterBox {
  Vector lo, hi;

  int dim() const { return static_cast<int>(lo.size()); }

  Vector sample(std::mt19937_64& rng) const {
    Vector mu(dim());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int d = 0; d < dim(); ++d) mu[d] = lo[d] + (hi[d] - lo[d]) * u(rng);
    return mu;
  }

  // Equidistant 1D grid including both endpoints; higher dimensions use
  // random training sets instead.
  std::vector<Vector> equidistant(int count) const {
    if (dim() != 1)
      throw Error("equidistant training set requires a 1D parameter box");
    if (count < 2) throw Error("equidistant training set needs >= 2 points");
    std::vector<Vector> out(count, Vector(1));
    for (int i = 0; i < count; ++i)
      out[i][0] = lo[0] + (hi[0] - lo[0]) * i / (count - 1);
    return out;
  }

  std::vector<Vector> random_set(int count, std::uint64_t seed,
                                 std::uint64_t stream) const {
    auto rng = make_rng(seed, stream);
    std::vector<Vector> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) out.push_back(sample(rng));
    return out;
  }
};

// Parameter functionals; only the forms the problems need.
struct Theta {
  enum class Kind { One, Component };
  Kind kind = Kind::One;
  int index = 0;

  double operator()(const Vector& mu) const {
    switch (kind) {
      case Kind::One: return 1.0;
      case Kind::Component: return mu[index];
    }
    return 0.0;
  }
};

struct SeparableCoefficient {
  int n_h = 0;
  std::vector<Vector> fields;  // per q, one value per fine cell
  std::vector<Theta> thetas;

  int Q() const { return static_cast<int>(fields.size()); }

  double theta(int q, const Vector& mu) const { return thetas[q](mu); }

  Vector evaluate(const Vector& mu) const {
    Vector a = Vector::Zero(fields[0].size());
    for (int q = 0; q < Q(); ++q) a += thetas[q](mu) * fields[q];
    return a;
  }
};

struct Problem {
  std::string name;
  SeparableCoefficient coefficient;
  ParameterBox box;
};

struct SpectralBounds {
  double alpha = 0, beta = 0, kappa = 0;
};

// Cellwise min/max of A_mu over a parameter collection.
inline SpectralBounds estimate_spectral_bounds(
    const SeparableCoefficient& c, const std::vector<Vector>& params) {
  if (params.empty()) throw Error("spectral bounds need a nonempty parameter set");
  SpectralBounds b;
  b.alpha = std::numeric_limits<double>::infinity();
  b.beta = 0.0;
  for (const Vector& mu : params) {
    Vector a = c.evaluate(mu);
    b.alpha = std::min(b.alpha, a.minCoeff());
    b.beta = std::max(b.beta, a.maxCoeff());
  }
  if (!(b.alpha > 0.0))
    throw Error("coefficient loses ellipticity over the given parameters");
  b.kappa = b.beta / b.alpha;
  return b;
}

inline SpectralBounds exact_bounds(const SeparableCoefficient& c, const Vector& mu) {
  return estimate_spectral_bounds(c, {mu});
}

namespace detail {

inline double truncated_normal(std::mt19937_64& rng, double lo, double hi) {
  const double mean = 0.5 * (lo + hi);
  const double sd = (hi - lo) / 4.0;
  std::normal_distribution<double> n(mean, sd);
  for (;;) {
    const double v = n(rng);
    if (v >= lo && v <= hi) return v;
  }
}

inline Problem make_constant(int n_h) {
  Problem p;
  p.name = "constant";
  p.coefficient.n_h = n_h;
  p.coefficient.fields = {Vector::Ones(n_h * n_h)};
  p.coefficient.thetas = {Theta{Theta::Kind::One, 0}};
  p.box.lo = Vector::Ones(1);
  p.box.hi = Vector::Ones(1);
  return p;
}

inline Problem make_thermal_block(int n_h) {
  Problem p;
  p.name = "thermal_block";
  p.coefficient.n_h = n_h;
  p.coefficient.fields.assign(4, Vector::Zero(n_h * n_h));
  for (int c = 0; c < n_h * n_h; ++c) {
    const int i = c % n_h, j = c / n_h;
    const int qx = (i >= n_h / 2) ? 1 : 0;
    const int qy = (j >= n_h / 2) ? 1 : 0;
    p.coefficient.fields[2 * qy + qx][c] = 1.0;
  }
  for (int q = 0; q < 4; ++q)
    p.coefficient.thetas.push_back(Theta{Theta::Kind::Component, q});
  p.box.lo = Vector::Constant(4, 0.1);
  p.box.hi = Vector::Constant(4, 10.0);
  return p;
}

// Single-parameter multiscale family: a jittered unit background crossed by
// thin low-conductivity vertical walls, plus horizontal channels whose
// conductivity scales with mu in [0, 5]. Feature widths follow the fine mesh
// so the microstructure stays one to two cells wide at every resolution.
inline Problem make_tc1_analog(int n_h, std::uint64_t seed) {
  Problem p;
  p.name = "tc1_analog";
  p.coefficient.n_h = n_h;
  Vector bg(n_h * n_h), ch(n_h * n_h);
  const int wall_period = std::max(2, n_h / 32);
  const int wall_width = std::max(1, n_h / 128);
  const int chan_period = std::max(2, n_h / 16);
  const int chan_width = std::max(1, n_h / 128);
  for (int c = 0; c < n_h * n_h; ++c) {
    const int i = c % n_h, j = c / n_h;
    auto rng = make_rng(seed, static_cast<std::uint64_t>(c));
    std::uniform_real_distribution<double> jitter(0.95, 1.05);
    const bool wall = (i % wall_period) < wall_width;
    bg[c] = (wall ? 0.1 : 1.0) * jitter(rng);
    ch[c] = ((j % chan_period) < chan_width) ? 0.24 : 0.0;
  }
  p.coefficient.fields = {bg, ch};
  p.coefficient.thetas = {Theta{Theta::Kind::One, 0},
                          Theta{Theta::Kind::Component, 0}};
  p.box.lo = Vector::Constant(1, 0.0);
  p.box.hi = Vector::Constant(1, 5.0);
  return p;
}

// Three-component family on [1,5]^3. Each component is a low-conductivity
// background dotted with high-conductivity particles; component geometry is
// drawn per coarse element from an RNG keyed on (seed, element, component),
// so a field is reproducible regardless of assembly order.
inline Problem make_tc2_analog(int n_h, int n_H, std::uint64_t seed) {
  if (n_H < 2 || n_h % n_H != 0)
    throw Error("tc2 analog needs the coarse mesh to define its geometry");
  Problem p;
  p.name = "tc2_analog";
  p.coefficient.n_h = n_h;
  p.coefficient.fields.assign(3, Vector::Zero(n_h * n_h));
  const int r = n_h / n_H;
  for (int t = 0; t < n_H * n_H; ++t) {
    const int tx = t % n_H, ty = t / n_H;
    for (int q = 0; q < 3; ++q) {
      auto rng = make_rng(seed ^ (0x9e3779b97f4a7c15ull * (q + 1)),
                          static_cast<std::uint64_t>(t));
      // Particle mask over the element's r x r cell block, in local
      // coordinates (u, v) in [0,1)^2 of the cell centers.
      std::vector<std::array<double, 4>> boxes;  // u0, v0, u1, v1
      std::array<double, 3> disk{0.5, 0.5, 0.0};
      if (q == 0) {
        disk = {0.5, 0.5, 0.27};
      } else if (q == 1) {
        boxes.push_back({0.15, 0.4, 0.85, 0.6});
      } else {
        std::uniform_real_distribution<double> pos(0.05, 0.6);
        std::uniform_real_distribution<double> len(0.15, 0.35);
        for (int b = 0; b < 3; ++b) {
          const double u0 = pos(rng), v0 = pos(rng);
          boxes.push_back({u0, v0, std::min(0.95, u0 + len(rng)),
                           std::min(0.95, v0 + len(rng))});
        }
      }
      for (int lj = 0; lj < r; ++lj)
        for (int li = 0; li < r; ++li) {
          const double u = (li + 0.5) / r, v = (lj + 0.5) / r;
          bool particle = false;
          if (q == 0) {
            const double du = u - disk[0], dv = v - disk[1];
            particle = du * du + dv * dv <= disk[2] * disk[2];
          }
          for (const auto& b : boxes)
            particle = particle || (u >= b[0] && u <= b[2] && v >= b[1] && v <= b[3]);
          const double value = particle ? truncated_normal(rng, 1.0, 1.2)
                                        : truncated_normal(rng, 0.03, 0.11);
          const int ci = tx * r + li, cj = ty * r + lj;
          p.coefficient.fields[q][cj * n_h + ci] = value;
        }
    }
  }
  for (int q = 0; q < 3; ++q)
    p.coefficient.thetas.push_back(Theta{Theta::Kind::Component, q});
  p.box.lo = Vector::Constant(3, 1.0);
  p.box.hi = Vector::Constant(3, 5.0);
  return p;
}

}  // namespace detail

inline Problem make_problem(const std::string& name, int n_h, int n_H,
                            std::uint64_t seed) {
  if (name == "constant") return detail::make_constant(n_h);
  if (name == "thermal_block") return detail::make_thermal_block(n_h);
  if (name == "tc1_analog") return detail::make_tc1_analog(n_h, seed);
  if (name == "tc2_analog") return detail::make_tc2_analog(n_h, n_H, seed);
  throw Error("unknown problem name '" + name + "'");
}

}  // namespace tslod::coeff
