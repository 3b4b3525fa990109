#pragma once

// Direct solvers and basis utilities. SPD systems go through SimplicialLDLT;
// saddle-point (KKT) systems through a single indefinite UMFPACK
// factorization, which on 2D patch problems is several times faster than
// Eigen's own SparseLU. Every solve verifies its residual contract and
// throws tslod::Error with the offending matrix role in the message.

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>
#include <Eigen/UmfPackSupport>

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tslod/common.hpp"

namespace tslod::linalg {

constexpr double kSpdResidualTol = 1e-10;
constexpr double kSymmetryTol = 1e-12;
constexpr double kConstraintTol = 1e-10;
constexpr double kDropTol = 1e-10;
constexpr double kGramTol = 1e-8;

inline void check_symmetric(const SpMat& A, const std::string& role) {
  SpMat D = SpMat(A.transpose()) - A;
  double amax = 0.0;
  for (int k = 0; k < A.outerSize(); ++k)
    for (SpMat::InnerIterator it(A, k); it; ++it)
      amax = std::max(amax, std::abs(it.value()));
  double dmax = 0.0;
  for (int k = 0; k < D.outerSize(); ++k)
    for (SpMat::InnerIterator it(D, k); it; ++it)
      dmax = std::max(dmax, std::abs(it.value()));
  if (dmax > kSymmetryTol * std::max(amax, 1e-300)) {
    std::ostringstream os;
    os << "matrix '" << role << "' is not symmetric: max asymmetry " << dmax
       << " exceeds " << kSymmetryTol << " * " << amax;
    throw Error(os.str());
  }
}

// Reusable SPD factorization (one factorization, many right-hand sides).
class SpdSolver {
 public:
  void compute(const SpMat& A, const std::string& role) {
    role_ = role;
    check_symmetric(A, role);
    A_ = A;
    ldlt_.compute(A_);
    if (ldlt_.info() != Eigen::Success)
      throw Error("SPD factorization of '" + role_ +
                  "' failed; matrix is singular or not positive definite");
    if ((ldlt_.vectorD().array() <= 0.0).any())
      throw Error("matrix '" + role_ +
                  "' is not positive definite (nonpositive pivot)");
  }

  Vector solve(const Vector& b) const {
    Vector x = ldlt_.solve(b);
    const double bn = b.norm();
    const double rel = (A_ * x - b).norm() / (bn > 0 ? bn : 1.0);
    if (!(rel <= kSpdResidualTol)) {
      std::ostringstream os;
      os << "SPD solve with '" << role_ << "' missed residual contract: "
         << rel << " > " << kSpdResidualTol;
      throw Error(os.str());
    }
    return x;
  }

  Matrix solve(const Matrix& B) const {
    Matrix X(B.rows(), B.cols());
    for (int c = 0; c < B.cols(); ++c) X.col(c) = solve(Vector(B.col(c)));
    return X;
  }

 private:
  SpMat A_;
  Eigen::SimplicialLDLT<SpMat> ldlt_;
  std::string role_;
};

inline Vector solve_spd_sparse(const SpMat& A, const Vector& b,
                               const std::string& role) {
  SpdSolver s;
  s.compute(A, role);
  return s.solve(b);
}

struct SaddleSolution {
  Vector x;       // primal, size n
  Vector lambda;  // multipliers, size m
};

namespace detail {
// Name the constraint rows that are linearly dependent: rank-revealing QR of
// C^T marks the columns (= rows of C) beyond the numerical rank.
inline std::string dependent_rows_message(const SpMat& C,
                                          const std::string& role) {
  Matrix Ct = Matrix(C.transpose());
  Eigen::ColPivHouseholderQR<Matrix> qr(Ct);
  qr.setThreshold(1e-10);
  const int rank = static_cast<int>(qr.rank());
  std::ostringstream os;
  os << "saddle-point system '" << role << "' has rank-deficient constraints"
     << " (rank " << rank << " of " << C.rows() << "); dependent rows:";
  const auto& perm = qr.colsPermutation().indices();
  std::vector<int> dep;
  for (int i = rank; i < perm.size(); ++i) dep.push_back(perm[i]);
  std::sort(dep.begin(), dep.end());
  for (int r : dep) os << ' ' << r;
  return os.str();
}
}  // namespace detail

// KKT solver for  [A C^T; C 0] [x; lambda] = [b; c]  with SPD A on ker(C).
// The pattern is kept so refactor() can swap in new A values (same sparsity)
// and reuse the symbolic analysis, the dominant saving when one patch is
// solved for many parameters.
class SaddleSolver {
 public:
  void compute(const SpMat& A, const SpMat& C, const std::string& role) {
    role_ = role;
    n_ = static_cast<int>(A.rows());
    m_ = static_cast<int>(C.rows());
    if (A.cols() != n_ || C.cols() != n_)
      throw Error("saddle-point system '" + role + "': shape mismatch");
    check_symmetric(A, role + " (A block)");
    std::vector<Triplet> t;
    t.reserve(A.nonZeros() + 2 * C.nonZeros());
    for (int k = 0; k < A.outerSize(); ++k)
      for (SpMat::InnerIterator it(A, k); it; ++it)
        t.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                       it.value());
    for (int k = 0; k < C.outerSize(); ++k)
      for (SpMat::InnerIterator it(C, k); it; ++it) {
        t.emplace_back(n_ + static_cast<int>(it.row()),
                       static_cast<int>(it.col()), it.value());
        t.emplace_back(static_cast<int>(it.col()),
                       n_ + static_cast<int>(it.row()), it.value());
      }
    K_.resize(n_ + m_, n_ + m_);
    K_.setFromTriplets(t.begin(), t.end());
    K_.makeCompressed();
    // The KKT matrix is value-symmetric; the symmetric ordering strategy
    // roughly halves factorization time and fill on these patch systems.
    lu_.umfpackControl()[UMFPACK_STRATEGY] = UMFPACK_STRATEGY_SYMMETRIC;
    // Map each nonzero of A into the KKT value array for cheap refactors.
    a_map_.clear();
    a_map_.reserve(A.nonZeros());
    for (int k = 0; k < A.outerSize(); ++k)
      for (SpMat::InnerIterator it(A, k); it; ++it) {
        const int col = static_cast<int>(it.col());
        const int row = static_cast<int>(it.row());
        const int* start = K_.innerIndexPtr() + K_.outerIndexPtr()[col];
        const int* end = K_.innerIndexPtr() + K_.outerIndexPtr()[col + 1];
        const int* pos = std::lower_bound(start, end, row);
        a_map_.push_back(static_cast<int>(pos - K_.innerIndexPtr()));
      }
    lu_.analyzePattern(K_);
    factorize(C);
  }

  // Replace the A block (same sparsity pattern as in compute) and refactor.
  void refactor(const SpMat& A) {
    if (static_cast<std::size_t>(A.nonZeros()) != a_map_.size())
      throw Error("saddle-point system '" + role_ +
                  "': refactor pattern mismatch");
    double* kv = K_.valuePtr();
    const double* av = A.valuePtr();
    for (std::size_t i = 0; i < a_map_.size(); ++i) kv[a_map_[i]] = av[i];
    lu_.factorize(K_);
    if (lu_.info() != Eigen::Success)
      throw Error("saddle-point refactorization of '" + role_ + "' failed");
  }

  SaddleSolution solve(const Vector& b,
                       const std::optional<Vector>& c = std::nullopt) const {
    Vector rhs = Vector::Zero(n_ + m_);
    rhs.head(n_) = b;
    if (c) rhs.tail(m_) = *c;
    Vector z = lu_.solve(rhs);
    SaddleSolution s{z.head(n_), z.tail(m_)};
    Vector cv = (K_ * z - rhs).tail(m_);
    const double viol = m_ > 0 ? cv.lpNorm<Eigen::Infinity>() : 0.0;
    if (!(viol <= kConstraintTol)) {
      SpMat C = K_.block(n_, 0, m_, n_);
      throw Error(detail::dependent_rows_message(C, role_) +
                  "; constraint violation " + std::to_string(viol));
    }
    return s;
  }

  int n() const { return n_; }
  int m() const { return m_; }

 private:
  void factorize(const SpMat& C) {
    lu_.factorize(K_);
    if (lu_.info() != Eigen::Success)
      throw Error(detail::dependent_rows_message(C, role_) +
                  "; indefinite factorization failed");
  }

  int n_ = 0, m_ = 0;
  SpMat K_;
  std::vector<int> a_map_;
  Eigen::UmfPackLU<SpMat> lu_;
  std::string role_;
};

inline SaddleSolution solve_saddle_point(const SpMat& A, const SpMat& C,
                                         const Vector& b,
                                         const std::optional<Vector>& c,
                                         const std::string& role) {
  SaddleSolver s;
  s.compute(A, C, role);
  return s.solve(b, c);
}

// Exact annihilator of a wide constraint matrix: v -> v - C^T (C C^T)^-1 C v.
// The normal matrix has one row per constraint (a handful of coarse nodes per
// patch), so a single dense Cholesky buys constraint removal for the cost of
// two sparse products per application. The result satisfies C v = 0 to solver
// precision; it differs from the metric-orthogonal projection by an in-kernel
// vector of the size of the incoming violation, which is all the conforming
// maps below need.
class ConstraintAnnihilator {
 public:
  explicit ConstraintAnnihilator(const SpMat& C) : C_(C), Ct_(C.transpose()) {
    if (C_.rows() == 0) return;
    Matrix M = Matrix(C_ * Ct_);
    llt_.compute(M);
    if (llt_.info() != Eigen::Success)
      throw Error("constraint normal matrix is not positive definite");
  }

  Vector apply(const Vector& v) const {
    if (C_.rows() == 0) return v;
    return v - Ct_ * llt_.solve(Vector(C_ * v));
  }

 private:
  SpMat C_, Ct_;
  Eigen::LLT<Matrix> llt_;
};

struct OrthoResult {
  std::vector<int> kept;  // indices of input vectors that survived
};

// Modified Gram-Schmidt with one full re-orthogonalization sweep. Vectors
// whose remainder falls below drop_tol times their incoming norm are dropped
// (their index is simply absent from 'kept'). On exit 'basis' holds an
// orthonormal set in the given inner product; the Gram deviation is checked
// against kGramTol. Works for any vector type with axpy and the usual
// arithmetic, so the two-scale block vectors reuse it.
template <class Vec, class InnerProduct>
OrthoResult orthonormalize(std::vector<Vec>& vectors, InnerProduct&& ip,
                           double drop_tol = kDropTol,
                           bool check_gram = true) {
  std::vector<Vec> basis;
  OrthoResult result;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    Vec v = vectors[i];
    const double n0 = std::sqrt(std::max(0.0, ip(v, v)));
    if (!(n0 > 0.0)) continue;
    for (int sweep = 0; sweep < 2; ++sweep)
      for (const Vec& q : basis) {
        const double c = ip(q, v);
        v -= c * q;
      }
    const double n1 = std::sqrt(std::max(0.0, ip(v, v)));
    if (n1 < drop_tol * n0) continue;
    v *= 1.0 / n1;
    basis.push_back(std::move(v));
    result.kept.push_back(static_cast<int>(i));
  }
  if (check_gram) {
    double dev = 0.0;
    for (std::size_t a = 0; a < basis.size(); ++a)
      for (std::size_t b = 0; b <= a; ++b) {
        const double g = ip(basis[a], basis[b]);
        dev = std::max(dev, std::abs(g - (a == b ? 1.0 : 0.0)));
      }
    if (dev > kGramTol) {
      std::ostringstream os;
      os << "orthonormalization Gram deviation " << dev << " exceeds "
         << kGramTol;
      throw Error(os.str());
    }
  }
  vectors = std::move(basis);
  return result;
}

// Extend an already orthonormal basis by new vectors, keeping the invariant.
// Returns how many survived the drop tolerance.
// Extension with an optional conforming map. When the vectors must stay in a
// constrained subspace (an interpolation kernel realized by approximate
// saddle point solves), the Gram-Schmidt leftover of a nearly dependent
// candidate is dominated by constraint violations; normalizing it would
// amplify them into spurious directions that later pair O(1) with Lagrange
// multiplier terms. Re-projecting before the norm test measures admissible
// content only, so junk candidates are dropped and kept ones stay conforming.
template <class Vec, class InnerProduct, class Conform>
int orthonormalize_extend_conforming(std::vector<Vec>& basis,
                                     const std::vector<Vec>& additions,
                                     InnerProduct&& ip, Conform&& conform,
                                     double drop_tol = kDropTol) {
  int added = 0;
  for (const Vec& cand : additions) {
    Vec v = cand;
    const double n0 = std::sqrt(std::max(0.0, ip(v, v)));
    if (!(n0 > 0.0)) continue;
    for (int sweep = 0; sweep < 2; ++sweep)
      for (const Vec& q : basis) {
        const double c = ip(q, v);
        v -= c * q;
      }
    v = conform(v);
    for (const Vec& q : basis) {
      const double c = ip(q, v);
      v -= c * q;
    }
    const double n1 = std::sqrt(std::max(0.0, ip(v, v)));
    if (n1 < drop_tol * n0) continue;
    v *= 1.0 / n1;
    basis.push_back(std::move(v));
    ++added;
  }
  return added;
}

template <class Vec, class InnerProduct>
int orthonormalize_extend(std::vector<Vec>& basis,
                          const std::vector<Vec>& additions, InnerProduct&& ip,
                          double drop_tol = kDropTol) {
  return orthonormalize_extend_conforming(
      basis, additions, ip, [](const Vec& v) { return v; }, drop_tol);
}

struct LeastSquaresSolution {
  Vector x;
  double residual_norm;  // recomputed as |A x - b|, not read off the factor
};

inline LeastSquaresSolution solve_least_squares(const Matrix& A,
                                                const Vector& b) {
  Eigen::ColPivHouseholderQR<Matrix> qr(A);
  Vector x = qr.solve(b);
  return {x, (A * x - b).norm()};
}

}  // namespace tslod::linalg
