#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dml/channel.hpp"
#include "dml/data.hpp"
#include "dml/error.hpp"
#include "dml/linalg.hpp"
#include "dml/range_tree.hpp"

namespace dml {

inline constexpr std::int64_t kUnassigned = -1;

/// Result of k-means (centroids) or k-windows (windows). `assignment` holds a
/// cluster id per point or kUnassigned.
struct ClusterModel {
  Matrix centroids;
  std::vector<Window> windows;
  /// Points captured by each window; a point may appear under several windows.
  std::vector<std::vector<std::size_t>> members;
  /// Windows that captured nothing in phase 1 and were left in place.
  std::vector<bool> frozen;
  std::vector<std::int64_t> assignment;
  double objective = 0.0;
  /// k-means objective after every assignment step.
  std::vector<double> objective_history;
  std::size_t iterations = 0;
};

enum class Norm { l2, linf };

struct KMeansOptions {
  Norm norm = Norm::l2;
  /// Rows of initial centers; empty means D seeded distinct data points.
  Matrix initial_centers;
  std::uint64_t seed = 0;
  std::size_t max_iters = 300;
  /// l2 only: after the alternation settles, move single points between
  /// clusters while that lowers the objective (Hartigan transfers).
  bool refine = true;
};

namespace detail {

template <typename A, typename B>
double center_distance(Norm norm, const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& c) {
  return norm == Norm::l2 ? (x - c).squaredNorm() : (x - c).template lpNorm<Eigen::Infinity>();
}

// Distinct row indices chosen by a partial Fisher-Yates draw.
inline std::vector<std::size_t> sample_rows(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Moving x from A to B changes the l2 objective by
// |B|/(|B|+1)·‖x−μ_B‖² − |A|/(|A|−1)·‖x−μ_A‖². Sweeps apply every improving
// move until none remains; the result is also an assignment fixed point.
inline void hartigan_transfers(ClusterModel& m, const Matrix& x, std::size_t max_sweeps) {
  const auto k = m.centroids.rows();
  std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
  Matrix sums = Matrix::Zero(k, x.cols());
  for (std::size_t i = 0; i < m.assignment.size(); ++i) {
    counts[static_cast<std::size_t>(m.assignment[i])] += 1.0;
    sums.row(m.assignment[i]) += x.row(static_cast<Eigen::Index>(i));
  }
  for (Eigen::Index c = 0; c < k; ++c) {
    if (counts[static_cast<std::size_t>(c)] > 0) m.centroids.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
  }
  bool moved = true;
  for (std::size_t sweep = 0; moved && sweep < max_sweeps; ++sweep) {
    moved = false;
    for (std::size_t i = 0; i < m.assignment.size(); ++i) {
      const auto row = x.row(static_cast<Eigen::Index>(i));
      const std::int64_t a = m.assignment[i];
      const double na = counts[static_cast<std::size_t>(a)];
      if (na <= 1.0) continue;
      const double removal = na / (na - 1.0) * (row - m.centroids.row(a)).squaredNorm();
      double best = removal;
      std::int64_t target = a;
      for (Eigen::Index b = 0; b < k; ++b) {
        if (b == a) continue;
        const double nb = counts[static_cast<std::size_t>(b)];
        const double add = nb / (nb + 1.0) * (row - m.centroids.row(b)).squaredNorm();
        if (add < best) {
          best = add;
          target = b;
        }
      }
      if (target == a) continue;
      counts[static_cast<std::size_t>(a)] -= 1.0;
      counts[static_cast<std::size_t>(target)] += 1.0;
      sums.row(a) -= row;
      sums.row(target) += row;
      m.centroids.row(a) = sums.row(a) / counts[static_cast<std::size_t>(a)];
      m.centroids.row(target) = sums.row(target) / counts[static_cast<std::size_t>(target)];
      m.assignment[i] = target;
      moved = true;
    }
    if (moved) {
      // Recompute from scratch so rounding from incremental updates does not accumulate.
      double obj = 0.0;
      for (std::size_t i = 0; i < m.assignment.size(); ++i) {
        obj += (x.row(static_cast<Eigen::Index>(i)) - m.centroids.row(m.assignment[i])).squaredNorm();
      }
      m.objective = obj;
      m.objective_history.push_back(obj);
    }
  }
}

}  // namespace detail

/// Hard-assignment k-means. Assignment goes to the nearest center (ties to the
/// lowest index); the update is the mean under l2 and the per-dimension
/// midrange under linf. An empty cluster is re-seeded at the point farthest
/// from its nearest center. Objective: Σ‖x−c‖₂² (l2) or Σ‖x−c‖∞ (linf).
/// Under l2 the alternation is followed by Hartigan transfers unless disabled.
inline ClusterModel kmeans(const Dataset& data, std::size_t clusters, const KMeansOptions& opts = {}) {
  const std::size_t n = data.size();
  if (clusters < 1 || clusters > n) throw InvalidArgument("kmeans needs 1 <= D <= N");
  const Matrix& x = data.points();
  const auto dcount = static_cast<Eigen::Index>(clusters);

  ClusterModel m;
  if (opts.initial_centers.size() > 0) {
    if (opts.initial_centers.rows() != dcount || opts.initial_centers.cols() != x.cols()) {
      throw InvalidArgument("initial centers must be D × n");
    }
    m.centroids = opts.initial_centers;
  } else {
    const auto rows = detail::sample_rows(n, clusters, opts.seed);
    m.centroids.resize(dcount, x.cols());
    for (Eigen::Index c = 0; c < dcount; ++c) m.centroids.row(c) = x.row(static_cast<Eigen::Index>(rows[c]));
  }

  m.assignment.assign(n, 0);
  auto assign = [&]() {
    double obj = 0.0;
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = x.row(static_cast<Eigen::Index>(i));
      double best = std::numeric_limits<double>::infinity();
      std::int64_t arg = 0;
      for (Eigen::Index c = 0; c < dcount; ++c) {
        const double d = detail::center_distance(opts.norm, row, m.centroids.row(c));
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      changed |= m.assignment[i] != arg;
      m.assignment[i] = arg;
      obj += best;
    }
    m.objective = obj;
    m.objective_history.push_back(obj);
    return changed;
  };

  auto update = [&]() {
    std::vector<std::size_t> counts(clusters, 0);
    Matrix sum = Matrix::Zero(dcount, x.cols());
    Matrix lo = Matrix::Constant(dcount, x.cols(), std::numeric_limits<double>::infinity());
    Matrix hi = Matrix::Constant(dcount, x.cols(), -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<Eigen::Index>(m.assignment[i]);
      const auto row = x.row(static_cast<Eigen::Index>(i));
      ++counts[static_cast<std::size_t>(c)];
      sum.row(c) += row;
      lo.row(c) = lo.row(c).cwiseMin(row);
      hi.row(c) = hi.row(c).cwiseMax(row);
    }
    for (Eigen::Index c = 0; c < dcount; ++c) {
      const std::size_t cnt = counts[static_cast<std::size_t>(c)];
      if (cnt == 0) continue;
      if (opts.norm == Norm::l2) {
        m.centroids.row(c) = sum.row(c) / static_cast<double>(cnt);
      } else {
        m.centroids.row(c) = 0.5 * (lo.row(c) + hi.row(c));
      }
    }
    for (Eigen::Index c = 0; c < dcount; ++c) {
      if (counts[static_cast<std::size_t>(c)] != 0) continue;
      double worst = -1.0;
      Eigen::Index arg = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = x.row(static_cast<Eigen::Index>(i));
        double nearest = std::numeric_limits<double>::infinity();
        for (Eigen::Index k = 0; k < dcount; ++k) {
          nearest = std::min(nearest, detail::center_distance(opts.norm, row, m.centroids.row(k)));
        }
        if (nearest > worst) {
          worst = nearest;
          arg = static_cast<Eigen::Index>(i);
        }
      }
      m.centroids.row(c) = x.row(arg);
    }
  };

  assign();
  for (m.iterations = 0; m.iterations < opts.max_iters;) {
    update();
    ++m.iterations;
    if (!assign()) break;
  }
  if (opts.norm == Norm::l2 && opts.refine) detail::hartigan_transfers(m, x, opts.max_iters);
  return m;
}

/// Lowest-objective k-means over seeds 0..restarts-1 mixed with `opts.seed`.
inline ClusterModel kmeans_best_of(const Dataset& data, std::size_t clusters, std::size_t restarts,
                                   KMeansOptions opts = {}) {
  if (restarts < 1) throw InvalidArgument("kmeans_best_of needs at least one restart");
  const std::uint64_t base = opts.seed;
  opts.initial_centers.resize(0, 0);
  std::optional<ClusterModel> best;
  for (std::size_t r = 0; r < restarts; ++r) {
    opts.seed = detail::mix_seed(base, r);
    ClusterModel m = kmeans(data, clusters, opts);
    if (!best || m.objective < best->objective) best = std::move(m);
  }
  return *best;
}

struct KWindowsConfig {
  std::size_t k_init = 1;
  /// Base radius r of every window.
  double radius = 1.0;
  /// Relative per-dimension enlargement e: the half-width grows by (1+e).
  double enlarge_step = 0.3;
  /// θ_e ∈ (0,1]: minimum new/old cardinality ratio for an enlargement.
  double enlarge_threshold = 0.8;
  /// An enlargement must also capture at least this many new points.
  std::size_t min_new_points = 1;
  /// ε: phase-1 iterations stop once the center moves less than this (ℓ2).
  double center_tol = 1e-6;
  /// θ_m ∈ (0,1]: minimum overlap |W_i ∩ W_j| / min(|W_i|, |W_j|) to merge.
  double merge_overlap = 0.2;
  std::size_t max_iters = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (k_init < 1) throw InvalidArgument("k_init must be >= 1");
    if (!(radius > 0.0)) throw InvalidArgument("radius must be > 0");
    if (!(enlarge_step > 0.0)) throw InvalidArgument("enlarge_step must be > 0");
    if (!(enlarge_threshold > 0.0 && enlarge_threshold <= 1.0)) {
      throw InvalidArgument("enlarge_threshold must lie in (0, 1]");
    }
    if (!(merge_overlap > 0.0 && merge_overlap <= 1.0)) throw InvalidArgument("merge_overlap must lie in (0, 1]");
    if (!(center_tol >= 0.0)) throw InvalidArgument("center_tol must be >= 0");
    if (max_iters < 1) throw InvalidArgument("max_iters must be >= 1");
  }
};

/// 0.5 × median nearest-neighbour distance × √n.
inline double default_radius(const Dataset& data) {
  const std::size_t n = data.size();
  if (n < 2) throw InvalidArgument("default_radius needs at least two points");
  const Matrix& x = data.points();
  std::vector<double> nn(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = (x.row(static_cast<Eigen::Index>(i)) - x.row(static_cast<Eigen::Index>(j))).norm();
      nn[i] = std::min(nn[i], d);
      nn[j] = std::min(nn[j], d);
    }
  }
  std::nth_element(nn.begin(), nn.begin() + static_cast<std::ptrdiff_t>(n / 2), nn.end());
  return 0.5 * nn[n / 2] * std::sqrt(static_cast<double>(data.dim()));
}

/// `count` distinct data points chosen from `seed`.
inline std::vector<Vector> initial_centers(const Dataset& data, std::size_t count, std::uint64_t seed) {
  if (count < 1 || count > data.size()) throw InvalidArgument("initial center count must lie in [1, N]");
  std::vector<Vector> out;
  for (const std::size_t r : detail::sample_rows(data.size(), count, seed)) out.push_back(data.row(r).transpose());
  return out;
}

namespace detail {

// Capture-then-recenter until the center moves less than tol or max_iters.
// Returns the final capture set; the window is left centred on the mean of
// the previous capture, and cardinality reflects the final capture.
inline std::vector<std::size_t> settle(Window& w, const RangeTree& tree, double tol, std::size_t max_iters) {
  std::vector<std::size_t> captured = tree.query(w);
  for (std::size_t it = 0; it < max_iters && !captured.empty(); ++it) {
    Vector mean = Vector::Zero(w.center.size());
    for (const std::size_t p : captured) mean += tree.points().row(static_cast<Eigen::Index>(p)).transpose();
    mean /= static_cast<double>(captured.size());
    const double moved = (mean - w.center).norm();
    w.center = std::move(mean);
    captured = tree.query(w);
    if (moved < tol) break;
  }
  w.cardinality = captured.size();
  return captured;
}

inline std::vector<std::int64_t> nearest_containing(const std::vector<Window>& windows, const Matrix& x) {
  std::vector<std::int64_t> out(static_cast<std::size_t>(x.rows()), kUnassigned);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < windows.size(); ++j) {
      const double d = weighted_linf_dist(x.row(i).transpose(), windows[j].center, windows[j].weights);
      if (d < windows[j].radius && d < best) {
        best = d;
        out[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(j);
      }
    }
  }
  return out;
}

inline double captured_objective(const ClusterModel& m, const Matrix& x) {
  double obj = 0.0;
  for (std::size_t i = 0; i < m.assignment.size(); ++i) {
    if (m.assignment[i] == kUnassigned) continue;
    obj += (x.row(static_cast<Eigen::Index>(i)).transpose() -
            m.windows[static_cast<std::size_t>(m.assignment[i])].center)
               .squaredNorm();
  }
  return obj;
}

inline void finalize(ClusterModel& m, const Matrix& x) {
  m.assignment = nearest_containing(m.windows, x);
  m.objective = captured_objective(m, x);
}

inline std::size_t intersection_size(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::size_t n = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) ++i;
    else if (*j < *i) ++j;
    else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

// Boxes (open) intersect in every dimension.
inline bool boxes_overlap(const Window& a, const Window& b) {
  const Vector ha = a.half_widths();
  const Vector hb = b.half_widths();
  for (Eigen::Index d = 0; d < a.center.size(); ++d) {
    if (!(std::abs(a.center(d) - b.center(d)) < ha(d) + hb(d))) return false;
  }
  return true;
}

// Pruning test: ℓ∞ center distance below twice the larger half-width. Any
// pair of overlapping boxes passes it.
inline bool merge_candidate(const Window& a, const Window& b) {
  const double dist = (a.center - b.center).lpNorm<Eigen::Infinity>();
  const double reach = std::max(a.half_widths().maxCoeff(), b.half_widths().maxCoeff());
  return dist < 2.0 * reach;
}

// Tightest box around both windows, centred on the cardinality-weighted
// mean of their centers.
inline Window merged_window(const Window& a, const Window& b) {
  const double ca = static_cast<double>(a.cardinality);
  const double cb = static_cast<double>(b.cardinality);
  Vector center = (ca + cb) > 0.0 ? Vector((ca * a.center + cb * b.center) / (ca + cb))
                                  : Vector(0.5 * (a.center + b.center));
  const Vector lo = (a.center - a.half_widths()).cwiseMin(b.center - b.half_widths());
  const Vector hi = (a.center + a.half_widths()).cwiseMax(b.center + b.half_widths());
  Window out;
  out.radius = a.radius;
  out.weights.resize(center.size());
  for (Eigen::Index d = 0; d < center.size(); ++d) {
    const double h = std::max(hi(d) - center(d), center(d) - lo(d));
    // One ulp wider: boxes are open.
    out.weights(d) = out.radius / std::nextafter(h, std::numeric_limits<double>::infinity());
  }
  out.center = std::move(center);
  out.cardinality = a.cardinality + b.cardinality;
  return out;
}

}  // namespace detail

/// Phase 1: windows of radius r (unit weights) at `init_centers`, each
/// repeatedly recentred on the mean of the points it captures until it moves
/// less than ε. A window that captures nothing stays put and is flagged frozen.
inline ClusterModel kwindows_phase1(const Dataset& data, const KWindowsConfig& cfg,
                                    const std::vector<Vector>& init_centers) {
  cfg.validate();
  if (init_centers.empty()) throw InvalidArgument("phase 1 needs at least one initial center");
  const RangeTree tree(data.points());
  ClusterModel m;
  for (const auto& c : init_centers) {
    if (static_cast<std::size_t>(c.size()) != data.dim()) throw InvalidArgument("initial center dimension mismatch");
    Window w = Window::cube(c, cfg.radius);
    auto captured = detail::settle(w, tree, cfg.center_tol, cfg.max_iters);
    m.frozen.push_back(captured.empty());
    m.members.push_back(std::move(captured));
    m.windows.push_back(std::move(w));
  }
  detail::finalize(m, data.points());
  return m;
}

/// Phase 2: per window and dimension, grow the half-width by (1+e), recentre,
/// and keep the change when new/old cardinality ≥ θ_e and at least
/// `min_new_points` new points were captured; otherwise revert and stop that
/// dimension. Each dimension grows at most ⌈log_{1+e}(data extent / half-width)⌉ times.
inline ClusterModel kwindows_enlarge(const ClusterModel& model, const Dataset& data, const KWindowsConfig& cfg) {
  cfg.validate();
  const RangeTree tree(data.points());
  const Vector extent = data.points().colwise().maxCoeff() - data.points().colwise().minCoeff();
  const double growth = 1.0 + cfg.enlarge_step;

  ClusterModel m = model;
  for (std::size_t j = 0; j < m.windows.size(); ++j) {
    if (m.frozen.size() > j && m.frozen[j]) continue;
    Window& w = m.windows[j];
    const auto n = w.center.size();
    std::vector<std::size_t> cap(static_cast<std::size_t>(n), 0);
    std::vector<std::size_t> used(static_cast<std::size_t>(n), 0);
    std::vector<bool> active(static_cast<std::size_t>(n), true);
    const Vector h0 = w.half_widths();
    for (Eigen::Index d = 0; d < n; ++d) {
      const double ratio = extent(d) / h0(d);
      cap[static_cast<std::size_t>(d)] =
          ratio > 1.0 ? static_cast<std::size_t>(std::ceil(std::log(ratio) / std::log(growth))) : 0;
    }
    auto any_active = [&] { return std::find(active.begin(), active.end(), true) != active.end(); };
    while (any_active()) {
      for (Eigen::Index d = 0; d < n; ++d) {
        const auto di = static_cast<std::size_t>(d);
        if (!active[di]) continue;
        if (used[di] >= cap[di]) {
          active[di] = false;
          continue;
        }
        ++used[di];
        Window trial = w;
        trial.weights(d) /= growth;
        auto captured = detail::settle(trial, tree, cfg.center_tol, cfg.max_iters);
        const std::size_t before = w.cardinality;
        const std::size_t after = trial.cardinality;
        const bool enough_ratio =
            before == 0 || static_cast<double>(after) >= cfg.enlarge_threshold * static_cast<double>(before);
        const bool grew = after >= before + cfg.min_new_points;
        if (enough_ratio && grew) {
          w = std::move(trial);
          m.members[j] = std::move(captured);
        } else {
          active[di] = false;
        }
      }
    }
  }
  detail::finalize(m, data.points());
  return m;
}

/// Phase 3: repeatedly merge the first candidate pair (i < j) whose overlap
/// |W_i ∩ W_j| / min(|W_i|, |W_j|) reaches θ_m into the tightest box around
/// both, until no pair qualifies. Points end up in the containing window with
/// the nearest center (weighted ℓ∞), or unassigned.
inline ClusterModel kwindows_merge(const ClusterModel& model, const Dataset& data, const KWindowsConfig& cfg) {
  cfg.validate();
  const RangeTree tree(data.points());
  ClusterModel m = model;
  if (m.frozen.size() != m.windows.size()) m.frozen.assign(m.windows.size(), false);
  bool merged = true;
  while (merged) {
    merged = false;
    for (std::size_t i = 0; i < m.windows.size() && !merged; ++i) {
      for (std::size_t j = i + 1; j < m.windows.size() && !merged; ++j) {
        const Window& a = m.windows[i];
        const Window& b = m.windows[j];
        if (!detail::merge_candidate(a, b)) continue;
        const std::size_t denom = std::min(m.members[i].size(), m.members[j].size());
        if (denom == 0) continue;
        const double overlap = static_cast<double>(detail::intersection_size(m.members[i], m.members[j])) /
                               static_cast<double>(denom);
        if (overlap < cfg.merge_overlap) continue;
        Window joined = detail::merged_window(a, b);
        m.members[i] = tree.query(joined);
        joined.cardinality = m.members[i].size();
        m.windows[i] = std::move(joined);
        m.frozen[i] = false;
        m.windows.erase(m.windows.begin() + static_cast<std::ptrdiff_t>(j));
        m.members.erase(m.members.begin() + static_cast<std::ptrdiff_t>(j));
        m.frozen.erase(m.frozen.begin() + static_cast<std::ptrdiff_t>(j));
        merged = true;
      }
    }
  }
  detail::finalize(m, data.points());
  return m;
}

/// Centralized pipeline: k_init seeded data points, then phases 1–3.
inline ClusterModel kwindows(const Dataset& data, const KWindowsConfig& cfg) {
  cfg.validate();
  const auto init = initial_centers(data, std::min(cfg.k_init, data.size()), cfg.seed);
  return kwindows_merge(kwindows_enlarge(kwindows_phase1(data, cfg, init), data, cfg), data, cfg);
}

/// What a node sends the server about one local window.
struct WindowSummary {
  Vector center;
  Vector weights;
  double radius = 0.0;
  std::size_t cardinality = 0;

  std::size_t wire_reals() const noexcept { return static_cast<std::size_t>(center.size() + weights.size()) + 2; }
};

template <>
struct is_summary_message<WindowSummary> : std::true_type {};

/// Server-side naive merge: every geometrically overlapping pair is merged,
/// regardless of how many points the overlap holds, until no boxes overlap.
inline std::vector<Window> naive_merge(std::vector<Window> windows) {
  bool merged = true;
  while (merged) {
    merged = false;
    for (std::size_t i = 0; i < windows.size() && !merged; ++i) {
      for (std::size_t j = i + 1; j < windows.size() && !merged; ++j) {
        if (!detail::merge_candidate(windows[i], windows[j]) || !detail::boxes_overlap(windows[i], windows[j])) {
          continue;
        }
        windows[i] = detail::merged_window(windows[i], windows[j]);
        windows.erase(windows.begin() + static_cast<std::ptrdiff_t>(j));
        merged = true;
      }
    }
  }
  return windows;
}

/// Phases 1–2 on one dataset with the node's init seed; the local half of
/// the distributed run.
inline std::vector<Window> local_windows(const Dataset& shard, const KWindowsConfig& cfg, std::uint32_t node) {
  const auto init =
      initial_centers(shard, std::min(cfg.k_init, shard.size()), detail::mix_seed(cfg.seed, node));
  const auto model = kwindows_enlarge(kwindows_phase1(shard, cfg, init), shard, cfg);
  std::vector<Window> out;
  for (std::size_t j = 0; j < model.windows.size(); ++j) {
    if (!model.frozen[j]) out.push_back(model.windows[j]);
  }
  return out;
}

struct DistributedKWindows {
  /// Server-merged windows, assignment over partition.pooled() rows.
  ClusterModel merged;
  /// Phases 1–2 plus naive merge run on the pooled data, for divergence.
  ClusterModel centralized;
};

/// Each node runs phases 1–2 locally and sends only window summaries; the
/// server merges every overlapping pair.
inline DistributedKWindows distributed_kwindows(const Partition& part, const KWindowsConfig& cfg,
                                                SummaryChannel<WindowSummary>* channel = nullptr) {
  cfg.validate();
  if (part.k() == 0) throw InvalidArgument("partition has no shards");
  SummaryChannel<WindowSummary> local;
  SummaryChannel<WindowSummary>& ch = channel ? *channel : local;
  for (std::uint32_t node = 0; node < part.k(); ++node) {
    if (part.shards[node].empty()) throw InvalidArgument("every shard must be nonempty");
    for (const auto& w : local_windows(part.shards[node], cfg, node)) {
      ch.send(node, WindowSummary{w.center, w.weights, w.radius, w.cardinality});
    }
  }

  std::vector<Window> received;
  for (const auto& env : ch.messages()) {
    received.push_back(Window{env.message.center, env.message.radius, env.message.weights, env.message.cardinality});
  }

  const Dataset pooled = part.pooled();
  DistributedKWindows out;
  out.merged.windows = naive_merge(std::move(received));
  out.merged.frozen.assign(out.merged.windows.size(), false);
  detail::finalize(out.merged, pooled.points());

  out.centralized.windows = naive_merge(local_windows(pooled, cfg, 0));
  out.centralized.frozen.assign(out.centralized.windows.size(), false);
  detail::finalize(out.centralized, pooled.points());
  return out;
}

/// Fraction of points whose cluster's majority label equals their own label.
/// Unassigned points count as disagreements.
inline double label_agreement(const std::vector<std::int64_t>& assignment, const Vector& labels) {
  if (static_cast<Eigen::Index>(assignment.size()) != labels.size()) {
    throw InvalidArgument("assignment and labels differ in length");
  }
  if (assignment.empty()) return 0.0;
  std::map<std::int64_t, std::map<double, std::size_t>> votes;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] != kUnassigned) ++votes[assignment[i]][labels(static_cast<Eigen::Index>(i))];
  }
  std::size_t agree = 0;
  for (const auto& [cluster, tally] : votes) {
    std::size_t best = 0;
    for (const auto& [label, count] : tally) best = std::max(best, count);
    agree += best;
  }
  return static_cast<double>(agree) / static_cast<double>(assignment.size());
}

}  // namespace dml
