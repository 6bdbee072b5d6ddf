#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dml/channel.hpp"
#include "dml/data.hpp"
#include "dml/error.hpp"
#include "dml/learners.hpp"
#include "dml/linalg.hpp"
#include "dml/server.hpp"
#include "dml/transport.hpp"

namespace dml {

/// Per-contact compute duration in simulated time units.
struct DelayModel {
  enum class Kind { constant, uniform };
  Kind kind = Kind::constant;
  double value = 1.0;  // constant
  double low = 0.0;    // uniform
  double high = 1.0;   // uniform
  std::uint64_t seed = 0;

  void validate() const {
    if (kind == Kind::constant && !(value >= 0.0)) throw InvalidArgument("constant delay must be >= 0");
    if (kind == Kind::uniform && !(low >= 0.0 && high >= low)) {
      throw InvalidArgument("uniform delay needs 0 <= low <= high");
    }
  }
};

/// serialized: every compute finishes before the next contact.
/// overlapped: a node computes on the θ it received at its previous contact
/// while others keep contacting the server.
struct ExecutionMode {
  enum class Kind { serialized, overlapped };
  Kind kind = Kind::serialized;
  DelayModel delay;

  static ExecutionMode serialized() { return {}; }
  static ExecutionMode overlapped(DelayModel d) { return {Kind::overlapped, d}; }
};

struct ContactRecord {
  std::uint64_t t = 0;
  std::uint32_t node_id = 0;
  /// Log index of the θ that `theta_pushed` was computed from.
  std::uint64_t base_t = 0;
  Theta theta_pushed;
  Theta theta_returned;
  double simulated_time = 0.0;
  std::int64_t wallclock_ns = 0;
  std::uint64_t bytes_sent = 0;
};

/// A first contact that only reads θ (overlapped mode).
struct PullRecord {
  std::uint32_t node_id = 0;
  std::uint64_t t = 0;
  double simulated_time = 0.0;
  std::uint64_t bytes_sent = 0;
};

struct Trace {
  std::vector<ContactRecord> records;
  std::vector<PullRecord> pulls;
  /// Last θ each node computed; empty for a node that never pushed.
  std::vector<std::optional<Theta>> terminal;

  const Theta& final_theta() const {
    if (records.empty()) throw InvalidArgument("trace has no pushes");
    return records.back().theta_pushed;
  }

  std::vector<std::size_t> contact_counts() const {
    std::vector<std::size_t> counts(terminal.size(), 0);
    for (const auto& r : records) ++counts[r.node_id];
    return counts;
  }
};

/// Equality of everything but wall-clock and byte counters.
inline bool same_trajectory(const Trace& a, const Trace& b) {
  if (a.records.size() != b.records.size() || a.pulls.size() != b.pulls.size() ||
      a.terminal.size() != b.terminal.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& x = a.records[i];
    const auto& y = b.records[i];
    if (x.t != y.t || x.node_id != y.node_id || x.base_t != y.base_t || !(x.theta_pushed == y.theta_pushed) ||
        !(x.theta_returned == y.theta_returned) || x.simulated_time != y.simulated_time) {
      return false;
    }
  }
  for (std::size_t i = 0; i < a.pulls.size(); ++i) {
    const auto& x = a.pulls[i];
    const auto& y = b.pulls[i];
    if (x.node_id != y.node_id || x.t != y.t || x.simulated_time != y.simulated_time) return false;
  }
  for (std::size_t i = 0; i < a.terminal.size(); ++i) {
    if (a.terminal[i].has_value() != b.terminal[i].has_value()) return false;
    if (a.terminal[i] && !(*a.terminal[i] == *b.terminal[i])) return false;
  }
  return true;
}

/// One learner per shard. Each shard's regularizer weight is scaled by
/// N_k/N so the local objectives sum to the pooled objective.
inline std::vector<Learner> make_learners(const Partition& part, const Objective& obj, const UpdatePolicy& policy) {
  const double total = static_cast<double>(part.total_size());
  std::vector<Learner> out;
  out.reserve(part.k());
  for (const auto& shard : part.shards) {
    if (shard.empty()) throw InvalidArgument("every shard must be nonempty");
    out.push_back(Learner{obj.scaled(static_cast<double>(shard.size()) / total),
                          std::make_shared<const Dataset>(shard), policy});
  }
  return out;
}

struct RunOptions {
  /// Defaults to zeros.
  std::optional<Theta> theta_init;
  /// Remote server to talk to; when null an in-process server is created.
  /// A supplied endpoint's server must start from `theta_init`.
  ServerEndpoint* endpoint = nullptr;
  std::function<void(const ContactRecord&)> on_contact;
};

/// Drives `total_contacts` pushes against the server. Serialized mode yields
/// θ_t = F^(S_t)(θ_{t-1}); overlapped mode yields θ_t = F^(S_t)(θ_b) where b
/// is the base_t recorded for the contact.
inline Trace run_schedule(const Partition& part, const Objective& obj, const UpdatePolicy& policy,
                          const Schedule& schedule, const ExecutionMode& mode, std::size_t total_contacts,
                          const RunOptions& opts = {}) {
  if (part.k() != schedule.k()) {
    throw InvalidArgument("schedule has " + std::to_string(schedule.k()) + " nodes but partition has " +
                          std::to_string(part.k()) + " shards");
  }
  if (total_contacts < 1) throw InvalidArgument("total_contacts must be >= 1");
  mode.delay.validate();
  policy.validate();

  const auto learners = make_learners(part, obj, policy);
  const Theta theta_init = opts.theta_init.value_or(Theta::zeros(part.dim()));
  if (theta_init.dim() != part.dim()) throw InvalidArgument("theta_init dimension does not match the data");

  std::unique_ptr<ParameterServer> local_server;
  std::unique_ptr<InProcessEndpoint> local_endpoint;
  ServerEndpoint* ep = opts.endpoint;
  if (!ep) {
    local_server = std::make_unique<ParameterServer>(theta_init);
    local_endpoint = std::make_unique<InProcessEndpoint>(*local_server);
    ep = local_endpoint.get();
  }

  const std::size_t k = part.k();
  Trace trace;
  trace.terminal.assign(k, std::nullopt);
  auto sampler = schedule.sampler();
  std::mt19937_64 delay_rng(mode.delay.seed);
  auto draw_delay = [&]() {
    if (mode.delay.kind == DelayModel::Kind::constant) return mode.delay.value;
    const double u = static_cast<double>(delay_rng() >> 11) * 0x1.0p-53;
    return mode.delay.low + u * (mode.delay.high - mode.delay.low);
  };
  std::vector<std::uint64_t> node_contacts(k, 0);
  auto stream_for = [&](std::uint32_t node) { return (std::uint64_t{node} << 32) | node_contacts[node]; };

  const auto wall_start = std::chrono::steady_clock::now();
  auto wall_ns = [&] {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - wall_start)
        .count();
  };

  auto emit = [&](ContactRecord rec) {
    if (opts.on_contact) opts.on_contact(rec);
    trace.terminal[rec.node_id] = rec.theta_pushed;
    trace.records.push_back(std::move(rec));
  };

  double clock = 0.0;
  if (mode.kind == ExecutionMode::Kind::serialized) {
    while (trace.records.size() < total_contacts) {
      const std::uint32_t node = sampler.next();
      const std::uint64_t bytes_before = ep->bytes_on_wire();
      const Reply base = ep->pull(node);
      Theta next = local_update(learners[node], base.theta, stream_for(node));
      ++node_contacts[node];
      clock += draw_delay();
      Reply swapped = ep->push_swap(node, next);
      emit(ContactRecord{swapped.t, node, base.t, std::move(next), std::move(swapped.theta), clock, wall_ns(),
                         ep->bytes_on_wire() - bytes_before});
    }
    return trace;
  }

  // Overlapped: per-node base θ and the simulated time its compute finishes.
  std::vector<std::optional<Reply>> base(k);
  std::vector<double> ready(k, 0.0);
  while (trace.records.size() < total_contacts) {
    const std::uint32_t node = sampler.next();
    clock = std::max(clock, ready[node]);
    const std::uint64_t bytes_before = ep->bytes_on_wire();
    if (!base[node]) {
      base[node] = ep->pull(node);
      trace.pulls.push_back(PullRecord{node, base[node]->t, clock, ep->bytes_on_wire() - bytes_before});
      ready[node] = clock + draw_delay();
      continue;
    }
    Theta next = local_update(learners[node], base[node]->theta, stream_for(node));
    ++node_contacts[node];
    Reply swapped = ep->push_swap(node, next);
    const std::uint64_t base_t = base[node]->t;
    // The returned value is θ_{t-1}.
    base[node] = Reply{swapped.theta, swapped.t - 1};
    emit(ContactRecord{swapped.t, node, base_t, std::move(next), std::move(swapped.theta), clock, wall_ns(),
                       ep->bytes_on_wire() - bytes_before});
    ready[node] = clock + draw_delay();
  }
  return trace;
}

/// One node's contribution to the pooled normal equations: X̃ᵀX̃ and X̃ᵀy
/// where X̃ carries a trailing ones column.
struct SecondOrderStats {
  Matrix gram;
  Vector moment;

  std::size_t wire_reals() const noexcept { return static_cast<std::size_t>(gram.size() + moment.size()); }
};

template <>
struct is_summary_message<SecondOrderStats> : std::true_type {};

inline SecondOrderStats local_statistics(const Dataset& shard) {
  const Matrix xa = augmented(shard.points());
  return SecondOrderStats{xa.transpose() * xa, xa.transpose() * shard.labels()};
}

/// Exact pooled least squares from per-node second-order statistics. Each
/// node sends (n+1)² + (n+1) reals through `channel`; the server sums and solves.
inline Theta aggregate_second_order(const Partition& part, SummaryChannel<SecondOrderStats>* channel = nullptr) {
  if (part.k() == 0) throw InvalidArgument("partition has no shards");
  SummaryChannel<SecondOrderStats> local;
  SummaryChannel<SecondOrderStats>& ch = channel ? *channel : local;
  for (std::uint32_t node = 0; node < part.k(); ++node) ch.send(node, local_statistics(part.shards[node]));

  const auto p = static_cast<Eigen::Index>(part.dim() + 1);
  Matrix w = Matrix::Zero(p, p);
  Vector v = Vector::Zero(p);
  for (const auto& env : ch.messages()) {
    if (env.message.gram.rows() != p || env.message.moment.size() != p) {
      throw InvalidArgument("node " + std::to_string(env.from) + " sent statistics of the wrong size");
    }
    w += env.message.gram;
    v += env.message.moment;
  }
  // The intercept entry of X̃ᵀX̃ counts the rows.
  const double rows = w(p - 1, p - 1);
  if (!(rows > static_cast<double>(p))) {
    throw InvalidArgument("aggregation needs more than n+1 pooled rows, got " + std::to_string(rows));
  }
  return Theta(linalg::spd_solve(w, v));
}

}  // namespace dml
