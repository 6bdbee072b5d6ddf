#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>

#include "dml/error.hpp"

namespace dml {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace linalg {

/// Outcome of an in-place Cholesky attempt. On failure `pivot` holds the
/// first non-positive pivot encountered and `index` its row.
struct CholeskyResult {
  bool ok = true;
  std::size_t index = 0;
  double pivot = 0.0;
  double smallest_pivot = std::numeric_limits<double>::infinity();
};

/// Lower-triangular factor L with A = L Lᵀ. Only the lower triangle of A is read.
/// A pivot counts as failed when it is not strictly greater than
/// `rel_floor * max_diag`.
inline CholeskyResult cholesky(const Matrix& a, Matrix& l, double rel_floor = 0.0) {
  const Eigen::Index n = a.rows();
  l.setZero(n, n);
  double max_diag = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i)));
  const double floor = rel_floor * max_diag;

  CholeskyResult res;
  for (Eigen::Index j = 0; j < n; ++j) {
    double d = a(j, j);
    for (Eigen::Index k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    res.smallest_pivot = std::min(res.smallest_pivot, d);
    if (!(d > floor)) {
      res.ok = false;
      res.index = static_cast<std::size_t>(j);
      res.pivot = d;
      return res;
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return res;
}

/// Solves L x = b for lower-triangular L.
inline Vector forward_substitute(const Matrix& l, const Vector& b) {
  const Eigen::Index n = l.rows();
  Vector x(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = b(i);
    for (Eigen::Index k = 0; k < i; ++k) s -= l(i, k) * x(k);
    x(i) = s / l(i, i);
  }
  return x;
}

/// Solves Lᵀ x = b for lower-triangular L.
inline Vector back_substitute_transposed(const Matrix& l, const Vector& b) {
  const Eigen::Index n = l.rows();
  Vector x(n);
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    double s = b(i);
    for (Eigen::Index k = i + 1; k < n; ++k) s -= l(k, i) * x(k);
    x(i) = s / l(i, i);
  }
  return x;
}

inline Vector cholesky_solve(const Matrix& l, const Vector& b) {
  return back_substitute_transposed(l, forward_substitute(l, b));
}

/// Solves the symmetric positive definite system A x = b, reporting a
/// rank-deficient A (pivot below 1e-12 of the largest diagonal) as RankDeficiency.
inline Vector spd_solve(const Matrix& a, const Vector& b) {
  Matrix l;
  const auto res = cholesky(a, l, 1e-12);
  if (!res.ok) {
    throw RankDeficiency("normal matrix is singular or rank-deficient (pivot " +
                         std::to_string(res.pivot) + " at row " + std::to_string(res.index) +
                         ")");
  }
  return cholesky_solve(l, b);
}

/// Largest-eigenvalue estimate of a symmetric PSD matrix by power iteration.
inline double power_iteration(const Matrix& a, int max_iters = 8, double tol = 1e-6) {
  const Eigen::Index n = a.rows();
  if (n == 0) return 0.0;
  Vector v = Vector::Ones(n) / std::sqrt(static_cast<double>(n));
  double lambda = 0.0;
  for (int it = 0; it < max_iters; ++it) {
    Vector w = a * v;
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    const double next = v.dot(w);
    v = w / norm;
    if (it > 0 && std::abs(next - lambda) <= tol * std::abs(next)) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return lambda;
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

}  // namespace linalg
}  // namespace dml
