#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dml/error.hpp"
#include "dml/learners.hpp"

namespace dml {

/// What a server contact hands back: a parameter vector and the server's
/// iteration counter after the contact.
struct Reply {
  Theta theta;
  std::uint64_t t = 0;
};

/// Central parameter store implementing the swap protocol. A push records
/// the incoming θ as θ_t and answers with θ_{t-1}. All members are safe to
/// call concurrently; pushes serialize in lock-acquisition order.
class ParameterServer {
 public:
  explicit ParameterServer(Theta theta_init) : log_{std::move(theta_init)} {}

  /// Current θ_t and t. Does not advance t.
  Reply pull(std::uint32_t /*node_id*/) const {
    std::lock_guard lock(mu_);
    return {log_.back(), log_.size() - 1};
  }

  /// Appends `theta` as θ_{t+1} and returns the value it displaced.
  Reply push_swap(std::uint32_t /*node_id*/, const Theta& theta) {
    if (!theta.values().allFinite()) throw InvalidArgument("pushed theta has non-finite entries");
    std::lock_guard lock(mu_);
    if (theta.values().size() != log_.front().values().size()) {
      throw InvalidArgument("pushed theta has " + std::to_string(theta.values().size()) +
                            " entries, server holds " + std::to_string(log_.front().values().size()));
    }
    Theta prev = log_.back();
    log_.push_back(theta);
    return {std::move(prev), log_.size() - 1};
  }

  std::uint64_t t() const {
    std::lock_guard lock(mu_);
    return log_.size() - 1;
  }

  std::size_t param_size() const noexcept { return static_cast<std::size_t>(log_.front().values().size()); }

  /// Snapshot of θ_0 … θ_t.
  std::vector<Theta> log() const {
    std::lock_guard lock(mu_);
    return log_;
  }

 private:
  mutable std::mutex mu_;
  std::vector<Theta> log_;
};

enum class ScheduleKind { round_robin, async_random };

/// Contact-order policy over nodes 0..k-1.
class Schedule {
 public:
  static Schedule round_robin(std::size_t k) {
    if (k < 1) throw InvalidArgument("schedule needs k >= 1");
    Schedule s;
    s.kind_ = ScheduleKind::round_robin;
    s.k_ = k;
    return s;
  }

  /// Every node must have strictly positive contact probability.
  static Schedule async_random(std::vector<double> probs, std::uint64_t seed) {
    if (probs.empty()) throw InvalidArgument("async schedule needs at least one node");
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (!(probs[i] > 0.0) || !std::isfinite(probs[i])) {
        throw InvalidArgument("async schedule probability for node " + std::to_string(i) +
                              " must be > 0 (every node has to contact the server)");
      }
      sum += probs[i];
    }
    if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument("async schedule probabilities must sum to 1");
    Schedule s;
    s.kind_ = ScheduleKind::async_random;
    s.k_ = probs.size();
    s.probs_ = std::move(probs);
    s.seed_ = seed;
    return s;
  }

  static Schedule uniform(std::size_t k, std::uint64_t seed) {
    if (k < 1) throw InvalidArgument("schedule needs k >= 1");
    return async_random(std::vector<double>(k, 1.0 / static_cast<double>(k)), seed);
  }

  ScheduleKind kind() const noexcept { return kind_; }
  std::size_t k() const noexcept { return k_; }
  const std::vector<double>& probs() const noexcept { return probs_; }
  std::uint64_t seed() const noexcept { return seed_; }

  /// Stateful draw sequence S_1, S_2, … for one run.
  class Sampler {
   public:
    explicit Sampler(const Schedule& s) : kind_(s.kind_), k_(s.k_), rng_(s.seed_) {
      cdf_.resize(s.probs_.size());
      std::partial_sum(s.probs_.begin(), s.probs_.end(), cdf_.begin());
    }

    std::uint32_t next() {
      if (kind_ == ScheduleKind::round_robin) {
        return static_cast<std::uint32_t>(count_++ % k_);
      }
      ++count_;
      // 53 random bits; portable across standard libraries.
      const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53 * cdf_.back();
      for (std::size_t i = 0; i < cdf_.size(); ++i) {
        if (u < cdf_[i]) return static_cast<std::uint32_t>(i);
      }
      return static_cast<std::uint32_t>(cdf_.size() - 1);
    }

   private:
    ScheduleKind kind_;
    std::size_t k_;
    std::mt19937_64 rng_;
    std::vector<double> cdf_;
    std::uint64_t count_ = 0;
  };

  Sampler sampler() const { return Sampler(*this); }

 private:
  Schedule() = default;

  ScheduleKind kind_ = ScheduleKind::round_robin;
  std::size_t k_ = 1;
  std::vector<double> probs_;
  std::uint64_t seed_ = 0;
};

}  // namespace dml
