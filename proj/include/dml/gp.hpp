#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "dml/data.hpp"
#include "dml/error.hpp"
#include "dml/linalg.hpp"

namespace dml::gp {

/// Squared-exponential covariance s²·exp(-‖x-x'‖² / (2ℓ²)) with a constant
/// prior mean. `noise_variance` is the σ² added to the training diagonal.
struct Kernel {
  double lengthscale = 1.0;
  double signal_variance = 1.0;
  double noise_variance = 0.0;
  double prior_mean = 0.0;

  void validate() const {
    if (!(lengthscale > 0.0)) throw InvalidArgument("kernel lengthscale must be > 0");
    if (!(signal_variance > 0.0)) throw InvalidArgument("kernel signal_variance must be > 0");
    if (!(noise_variance >= 0.0)) throw InvalidArgument("kernel noise_variance must be >= 0");
  }

  template <typename A, typename B>
  double operator()(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& y) const {
    const double d2 = (x - y).squaredNorm();
    return signal_variance * std::exp(-0.5 * d2 / (lengthscale * lengthscale));
  }
};

inline Matrix covariance(const Kernel& k, const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) out(i, j) = k(a.row(i), b.row(j));
  }
  return out;
}

/// Exact GP posterior on one data set.
struct Model {
  Matrix x;
  Vector y;
  Kernel kernel;
  /// Lower Cholesky factor of K(X,X) + (σ² + jitter)·I.
  Matrix chol;
  /// (K + σ²I)⁻¹ (y − μ₀).
  Vector alpha;
  double jitter = 0.0;

  std::size_t size() const noexcept { return static_cast<std::size_t>(x.rows()); }
};

/// Predictive distribution of the latent f at one input.
struct Prediction {
  double mu = 0.0;
  double var = 0.0;
};

inline Model fit(const Matrix& x, const Vector& y, const Kernel& kernel) {
  kernel.validate();
  if (x.rows() < 1) throw InvalidArgument("gp fit needs at least one point");
  if (y.size() != x.rows()) throw InvalidArgument("gp fit: target length does not match inputs");
  if (!x.allFinite() || !y.allFinite()) throw InvalidArgument("gp fit: non-finite training data");

  Matrix k = covariance(kernel, x, x);
  k.diagonal().array() += kernel.noise_variance;

  // Pivots at rounding level (e.g. from duplicate inputs) count as failures.
  const double floor = static_cast<double>(x.rows()) * std::numeric_limits<double>::epsilon();
  Model m{x, y, kernel, {}, {}, 0.0};
  auto res = linalg::cholesky(k, m.chol, floor);
  if (!res.ok) {
    // One retry with a small diagonal jitter.
    m.jitter = 1e-10 * kernel.signal_variance;
    Matrix kj = k;
    kj.diagonal().array() += m.jitter;
    res = linalg::cholesky(kj, m.chol, floor);
    if (!res.ok) {
      throw NumericalError("covariance matrix is not positive definite: smallest pivot " +
                           std::to_string(res.pivot) + " at row " + std::to_string(res.index));
    }
  }
  m.alpha = linalg::cholesky_solve(m.chol, (y.array() - kernel.prior_mean).matrix());
  return m;
}

inline Model fit(const Dataset& data, const Kernel& kernel) { return fit(data.points(), data.labels(), kernel); }

template <typename Derived>
Prediction predict(const Model& m, const Eigen::MatrixBase<Derived>& x_star) {
  if (x_star.size() != m.x.cols()) throw InvalidArgument("gp predict: input dimension mismatch");
  Vector ks(m.x.rows());
  for (Eigen::Index i = 0; i < m.x.rows(); ++i) ks(i) = m.kernel(m.x.row(i).transpose(), x_star.derived());
  const double prior_var = m.kernel.signal_variance;
  const Vector v = linalg::forward_substitute(m.chol, ks);
  double var = prior_var - v.squaredNorm();
  // Cancellation can push var to or below zero next to training inputs.
  const double floor = prior_var * std::numeric_limits<double>::epsilon();
  if (var < floor) var = floor;
  return {m.kernel.prior_mean + ks.dot(m.alpha), var};
}

/// Adds the observation noise to a latent prediction.
inline Prediction with_noise(Prediction p, const Kernel& k) {
  p.var += k.noise_variance;
  return p;
}

/// log p(y | X) = −½ (y−μ₀)ᵀ(K+σ²I)⁻¹(y−μ₀) − ½ log det(K+σ²I) − ½ N log 2π.
inline double log_marginal_likelihood(const Model& m) {
  const Vector r = (m.y.array() - m.kernel.prior_mean).matrix();
  const double logdet = 2.0 * m.chol.diagonal().array().log().sum();
  const double n = static_cast<double>(m.size());
  return -0.5 * r.dot(m.alpha) - 0.5 * logdet - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

struct ExpertFit {
  std::vector<Model> models;
  Kernel kernel;
  /// Σ_k local log likelihood for each grid entry; -inf where a shard failed to factorize.
  std::vector<double> scores;
};

/// Fits one expert per shard, choosing the grid kernel that maximizes the sum
/// of local log marginal likelihoods. Ties go to the smaller lengthscale,
/// then the smaller signal variance.
inline ExpertFit fit_experts(const Partition& part, const std::vector<Kernel>& grid) {
  if (grid.empty()) throw InvalidArgument("kernel grid is empty");
  if (part.k() == 0) throw InvalidArgument("partition has no shards");
  for (const auto& s : part.shards) {
    if (s.empty()) throw InvalidArgument("every shard must be nonempty");
  }

  ExpertFit out;
  out.scores.assign(grid.size(), -std::numeric_limits<double>::infinity());
  std::size_t best = grid.size();
  for (std::size_t g = 0; g < grid.size(); ++g) {
    grid[g].validate();
    double total = 0.0;
    try {
      for (const auto& s : part.shards) total += log_marginal_likelihood(fit(s, grid[g]));
    } catch (const NumericalError&) {
      continue;
    }
    out.scores[g] = total;
    if (best == grid.size()) {
      best = g;
      continue;
    }
    const Kernel& cur = grid[best];
    const Kernel& cand = grid[g];
    const bool better = total > out.scores[best] ||
                        (total == out.scores[best] &&
                         (cand.lengthscale < cur.lengthscale ||
                          (cand.lengthscale == cur.lengthscale && cand.signal_variance < cur.signal_variance)));
    if (better) best = g;
  }
  if (best == grid.size()) throw NumericalError("no grid kernel factorizes on every shard");

  out.kernel = grid[best];
  for (const auto& s : part.shards) out.models.push_back(fit(s, out.kernel));
  return out;
}

enum class RuleKind { poe, gpoe, bcm, gbcm };

/// Committee rule. `betas` empty means β_k = 1/K for gpoe/gbcm.
/// `prior_var` is σ0², the prior variance of f*, used by bcm/gbcm.
struct CombinationRule {
  RuleKind kind = RuleKind::poe;
  std::vector<double> betas;
  double prior_var = 1.0;

  /// Betas that will actually be applied to K experts.
  std::vector<double> effective_betas(std::size_t k) const {
    if (kind == RuleKind::poe || kind == RuleKind::bcm) return std::vector<double>(k, 1.0);
    if (betas.empty()) return std::vector<double>(k, 1.0 / static_cast<double>(k));
    if (betas.size() != k) {
      throw InvalidArgument("rule has " + std::to_string(betas.size()) + " betas for " + std::to_string(k) +
                            " experts");
    }
    for (double b : betas) {
      if (!(b > 0.0)) throw InvalidArgument("betas must be > 0");
    }
    return betas;
  }

  /// False when gpoe/gbcm betas are supplied and do not sum to 1.
  bool betas_normalized() const {
    if (betas.empty() || kind == RuleKind::poe || kind == RuleKind::bcm) return true;
    double s = 0.0;
    for (double b : betas) s += b;
    return std::abs(s - 1.0) <= 1e-12;
  }
};

/// Combined precision σ*⁻² = Σ β_k σ_k⁻² (+ (1 − Σβ) σ0⁻² for bcm/gbcm) and
/// mean μ* = σ*² Σ β_k σ_k⁻² μ_k. Expert means are taken relative to a zero prior mean.
inline Prediction combine(const std::vector<Prediction>& experts, const CombinationRule& rule) {
  if (experts.empty()) throw InvalidArgument("combine needs at least one expert");
  const auto betas = rule.effective_betas(experts.size());
  if ((rule.kind == RuleKind::bcm || rule.kind == RuleKind::gbcm) && !(rule.prior_var > 0.0)) {
    throw InvalidArgument("prior_var must be > 0");
  }
  double precision = 0.0;
  double weighted = 0.0;
  double beta_sum = 0.0;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    if (!(experts[i].var > 0.0)) throw InvalidArgument("expert variance must be > 0");
    const double p = betas[i] / experts[i].var;
    precision += p;
    weighted += p * experts[i].mu;
    beta_sum += betas[i];
  }
  if (rule.kind == RuleKind::bcm || rule.kind == RuleKind::gbcm) {
    precision += (1.0 - beta_sum) / rule.prior_var;
  }
  if (!(precision > 0.0) || !std::isfinite(precision)) throw NumericalError("inconsistent committee precision");
  const double var = 1.0 / precision;
  return {var * weighted, var};
}

/// Committee prediction from fitted experts sharing one prior mean: experts are
/// centred on μ₀ before combining and the result shifted back.
template <typename Derived>
Prediction committee_predict(const std::vector<Model>& experts, const Eigen::MatrixBase<Derived>& x_star,
                             const CombinationRule& rule) {
  if (experts.empty()) throw InvalidArgument("committee has no experts");
  const double mu0 = experts.front().kernel.prior_mean;
  std::vector<Prediction> preds;
  preds.reserve(experts.size());
  for (const auto& m : experts) {
    Prediction p = predict(m, x_star);
    p.mu -= mu0;
    preds.push_back(p);
  }
  Prediction out = combine(preds, rule);
  out.mu += mu0;
  return out;
}

}  // namespace dml::gp
