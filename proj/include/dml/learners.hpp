#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dml/data.hpp"
#include "dml/error.hpp"
#include "dml/linalg.hpp"

namespace dml {

/// Parameters of a linear model: weights a (length n) followed by intercept b.
class Theta {
 public:
  Theta() = default;
  explicit Theta(Vector values) : values_(std::move(values)) {
    if (values_.size() < 1) throw InvalidArgument("theta needs at least the intercept entry");
    if (!values_.allFinite()) throw InvalidArgument("theta has non-finite entries");
  }
  Theta(const Vector& weights, double intercept) : values_(weights.size() + 1) {
    values_.head(weights.size()) = weights;
    values_(weights.size()) = intercept;
    if (!values_.allFinite()) throw InvalidArgument("theta has non-finite entries");
  }

  static Theta zeros(std::size_t dim) { return Theta(Vector::Zero(static_cast<Eigen::Index>(dim + 1))); }

  /// Feature dimension n (the vector itself has n+1 entries).
  std::size_t dim() const noexcept { return values_.size() == 0 ? 0 : static_cast<std::size_t>(values_.size() - 1); }
  const Vector& values() const noexcept { return values_; }
  auto weights() const { return values_.head(values_.size() - 1); }
  double intercept() const { return values_(values_.size() - 1); }

  friend bool operator==(const Theta& a, const Theta& b) {
    return a.values_.size() == b.values_.size() && a.values_ == b.values_;
  }

 private:
  Vector values_;
};

enum class LossKind { squared, logistic };
enum class Regularizer { none, l1, l2 };

/// Σ_i f(x_i, y_i | θ) + λ·g(a). The intercept is never regularized.
/// l1: g(a) = ‖a‖₁. l2: g(a) = ½‖a‖₂². Logistic labels are 0/1.
struct Objective {
  LossKind loss = LossKind::squared;
  Regularizer regularizer = Regularizer::none;
  double lambda = 0.0;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidArgument("lambda must be finite and >= 0");
  }

  /// The same objective with the regularizer weight multiplied by `factor`.
  Objective scaled(double factor) const { return Objective{loss, regularizer, lambda * factor}; }
};

enum class UpdateMode { deterministic_full_gradient, stochastic_minibatch };

struct UpdatePolicy {
  double step_size = 0.0;
  std::size_t epochs = 1;
  /// Empty means the full shard.
  std::optional<std::size_t> batch_size;
  UpdateMode mode = UpdateMode::deterministic_full_gradient;
  std::uint64_t seed = 0;
  /// Iterative oracle stops once ‖θ_new − θ_old‖∞ falls below this (0 disables).
  double tolerance = 0.0;

  void validate() const {
    if (!(step_size > 0.0) || !std::isfinite(step_size)) throw InvalidArgument("step_size must be finite and > 0");
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (batch_size && *batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  }
};

namespace detail {

inline void check_dims(const Theta& theta, const Dataset& data) {
  if (theta.dim() != data.dim()) {
    throw InvalidArgument("theta has dimension " + std::to_string(theta.dim()) + " but dataset has " +
                          std::to_string(data.dim()));
  }
}

inline double log1p_exp(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double regularizer_value(const Objective& obj, const Theta& theta) {
  switch (obj.regularizer) {
    case Regularizer::none: return 0.0;
    case Regularizer::l1: return obj.lambda * theta.weights().lpNorm<1>();
    case Regularizer::l2: return 0.5 * obj.lambda * theta.weights().squaredNorm();
  }
  return 0.0;
}

}  // namespace detail

/// Design matrix with a trailing ones column for the intercept.
inline Matrix augmented(const Matrix& x) {
  Matrix out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  out.col(x.cols()).setOnes();
  return out;
}

inline double loss(const Objective& obj, const Theta& theta, const Dataset& data) {
  obj.validate();
  detail::check_dims(theta, data);
  const Vector& y = data.labels();
  const Vector z = data.points() * theta.weights() + Vector::Constant(data.points().rows(), theta.intercept());
  double total = 0.0;
  switch (obj.loss) {
    case LossKind::squared:
      total = 0.5 * (y - z).squaredNorm();
      break;
    case LossKind::logistic:
      for (Eigen::Index i = 0; i < z.size(); ++i) total += detail::log1p_exp(z(i)) - y(i) * z(i);
      break;
  }
  return total + detail::regularizer_value(obj, theta);
}

/// Gradient of the smooth part over the rows in `batch`. An l2 term enters
/// with weight |batch|/N so that single-row gradients sum to the full gradient.
inline Vector gradient(const Objective& obj, const Theta& theta, const Dataset& data,
                       const std::vector<std::size_t>& batch) {
  obj.validate();
  detail::check_dims(theta, data);
  if (batch.empty()) throw InvalidArgument("gradient batch is empty");
  const Vector& y = data.labels();
  const auto n = static_cast<Eigen::Index>(data.dim());
  Vector g = Vector::Zero(n + 1);
  const auto a = theta.weights();
  const double b = theta.intercept();
  for (const std::size_t idx : batch) {
    if (idx >= data.size()) throw InvalidArgument("batch index " + std::to_string(idx) + " out of range");
    const auto i = static_cast<Eigen::Index>(idx);
    const auto x = data.points().row(i);
    const double z = x.dot(a) + b;
    const double r = obj.loss == LossKind::squared ? z - y(i) : detail::sigmoid(z) - y(i);
    g.head(n) += r * x.transpose();
    g(n) += r;
  }
  if (obj.regularizer == Regularizer::l2) {
    const double frac = static_cast<double>(batch.size()) / static_cast<double>(data.size());
    g.head(n) += frac * obj.lambda * a;
  }
  return g;
}

inline Vector gradient(const Objective& obj, const Theta& theta, const Dataset& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return gradient(obj, theta, data, all);
}

/// Soft-thresholding of the weight entries; the trailing intercept passes through.
inline Vector prox_l1(const Vector& v, double t) {
  if (!(t >= 0.0)) throw InvalidArgument("prox threshold must be >= 0");
  Vector out = v;
  for (Eigen::Index i = 0; i + 1 < v.size(); ++i) {
    const double w = v(i);
    const double mag = std::max(std::abs(w) - t, 0.0);
    out(i) = w > 0.0 ? mag : (w < 0.0 ? -mag : 0.0);
  }
  return out;
}

/// Lipschitz constant estimate of the smooth part's gradient on `data`.
inline double lipschitz_estimate(const Objective& obj, const Dataset& data) {
  const Matrix xa = augmented(data.points());
  double l = linalg::power_iteration(xa.transpose() * xa, 8, 1e-6);
  if (obj.loss == LossKind::logistic) l *= 0.25;
  if (obj.regularizer == Regularizer::l2) l += obj.lambda;
  return l;
}

/// 0.5 / L with L from `lipschitz_estimate`.
inline double default_step_size(const Objective& obj, const Dataset& data) {
  const double l = lipschitz_estimate(obj, data);
  if (!(l > 0.0)) throw NumericalError("cannot derive a step size: Lipschitz estimate is zero");
  return 0.5 / l;
}

/// One proximal-gradient step on `batch`.
inline Theta proximal_step(const Objective& obj, const Theta& theta, const Dataset& data,
                           const std::vector<std::size_t>& batch, double step) {
  const Vector g = gradient(obj, theta, data, batch);
  Vector next = theta.values() - step * g;
  if (obj.regularizer == Regularizer::l1) {
    const double frac = static_cast<double>(batch.size()) / static_cast<double>(data.size());
    next = prox_l1(next, step * frac * obj.lambda);
  }
  if (!next.allFinite()) throw NumericalError("proximal step diverged to non-finite values");
  return Theta(std::move(next));
}

/// The per-node update operator: a fixed objective, shard and policy.
struct Learner {
  Objective objective;
  std::shared_ptr<const Dataset> shard;
  UpdatePolicy policy;
};

/// Runs `policy.epochs` passes of (mini-batch) proximal gradient on the shard.
/// Stochastic mode draws its batches from (policy.seed, stream); full-gradient
/// mode ignores `stream`.
inline Theta local_update(const Learner& learner, const Theta& theta_in, std::uint64_t stream = 0) {
  if (!learner.shard || learner.shard->empty()) throw InvalidArgument("local_update needs a nonempty shard");
  const Dataset& data = *learner.shard;
  learner.objective.validate();
  learner.policy.validate();
  detail::check_dims(theta_in, data);

  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Theta theta = theta_in;
  const double step = learner.policy.step_size;

  if (learner.policy.mode == UpdateMode::deterministic_full_gradient) {
    for (std::size_t e = 0; e < learner.policy.epochs; ++e) {
      theta = proximal_step(learner.objective, theta, data, order, step);
    }
    return theta;
  }

  std::seed_seq seq{static_cast<std::uint32_t>(learner.policy.seed), static_cast<std::uint32_t>(learner.policy.seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::mt19937_64 rng(seq);
  const std::size_t bs = std::min(learner.policy.batch_size.value_or(n), n);
  std::vector<std::size_t> batch;
  batch.reserve(bs);
  for (std::size_t e = 0; e < learner.policy.epochs; ++e) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);
    for (std::size_t start = 0; start < n; start += bs) {
      batch.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                   order.begin() + static_cast<std::ptrdiff_t>(std::min(start + bs, n)));
      theta = proximal_step(learner.objective, theta, data, batch, step);
    }
  }
  return theta;
}

/// Solves the (ridge-)regularized normal equations
/// (X̃ᵀX̃ + λ·diag(1,…,1,0)) θ = X̃ᵀy for squared loss with no or l2 regularization.
inline Theta normal_equations(const Objective& obj, const Dataset& data) {
  if (obj.loss != LossKind::squared || obj.regularizer == Regularizer::l1) {
    throw InvalidArgument("closed form exists only for squared loss with none/l2 regularization");
  }
  const Matrix xa = augmented(data.points());
  Matrix w = xa.transpose() * xa;
  if (obj.regularizer == Regularizer::l2) {
    for (Eigen::Index j = 0; j + 1 < w.rows(); ++j) w(j, j) += obj.lambda;
  }
  const Vector v = xa.transpose() * data.labels();
  return Theta(linalg::spd_solve(w, v));
}

/// Non-distributed reference optimizer: full-gradient proximal descent from
/// zero for at most `policy.epochs` iterations, stopping early at `policy.tolerance`.
inline Theta centralized_oracle(const Objective& obj, const Dataset& data, const UpdatePolicy& policy) {
  if (data.empty()) throw InvalidArgument("centralized_oracle needs a nonempty dataset");
  UpdatePolicy p = policy;
  if (!(p.step_size > 0.0)) p.step_size = default_step_size(obj, data);
  p.validate();
  obj.validate();
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  Theta theta = Theta::zeros(data.dim());
  for (std::size_t e = 0; e < p.epochs; ++e) {
    Theta next = proximal_step(obj, theta, data, all, p.step_size);
    const double moved = (next.values() - theta.values()).lpNorm<Eigen::Infinity>();
    theta = std::move(next);
    if (p.tolerance > 0.0 && moved < p.tolerance) break;
  }
  return theta;
}

}  // namespace dml
