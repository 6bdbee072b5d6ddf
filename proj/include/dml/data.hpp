#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dml/error.hpp"
#include "dml/linalg.hpp"

namespace dml {

enum class LabelKind { none, real, integer };

/// N×n feature matrix with optional labels. Immutable after construction.
class Dataset {
 public:
  Dataset() = default;

  explicit Dataset(Matrix points) : Dataset(std::move(points), std::nullopt, LabelKind::none) {}

  Dataset(Matrix points, std::optional<Vector> labels, LabelKind kind)
      : points_(std::move(points)), labels_(std::move(labels)), kind_(kind) {
    if (!labels_) kind_ = LabelKind::none;
    if (labels_ && kind_ == LabelKind::none) kind_ = LabelKind::real;
    if (labels_ && labels_->size() != points_.rows()) {
      throw InvalidArgument("labels have length " + std::to_string(labels_->size()) +
                            " but dataset has " + std::to_string(points_.rows()) + " rows");
    }
    if (!points_.allFinite()) throw InvalidArgument("dataset contains non-finite feature values");
    if (labels_ && !labels_->allFinite()) throw InvalidArgument("dataset contains non-finite labels");
    if (kind_ == LabelKind::integer) {
      for (Eigen::Index i = 0; i < labels_->size(); ++i) {
        if ((*labels_)(i) != std::round((*labels_)(i))) {
          throw InvalidArgument("integer labels must be whole numbers");
        }
      }
    }
  }

  std::size_t size() const noexcept { return static_cast<std::size_t>(points_.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(points_.cols()); }
  bool empty() const noexcept { return points_.rows() == 0; }

  const Matrix& points() const noexcept { return points_; }
  bool has_labels() const noexcept { return labels_.has_value(); }
  LabelKind label_kind() const noexcept { return kind_; }

  const Vector& labels() const {
    if (!labels_) throw InvalidArgument("dataset has no labels");
    return *labels_;
  }

  auto row(std::size_t i) const { return points_.row(static_cast<Eigen::Index>(i)); }

  /// Rows selected by `indices`, in that order.
  Dataset subset(const std::vector<std::size_t>& indices) const {
    Matrix pts(static_cast<Eigen::Index>(indices.size()), points_.cols());
    std::optional<Vector> lab;
    if (labels_) lab = Vector(static_cast<Eigen::Index>(indices.size()));
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const auto src = static_cast<Eigen::Index>(indices[r]);
      if (indices[r] >= size()) throw InvalidArgument("subset index out of range");
      pts.row(static_cast<Eigen::Index>(r)) = points_.row(src);
      if (lab) (*lab)(static_cast<Eigen::Index>(r)) = (*labels_)(src);
    }
    return Dataset(std::move(pts), std::move(lab), kind_);
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    if (a.kind_ != b.kind_ || a.points_.rows() != b.points_.rows() ||
        a.points_.cols() != b.points_.cols() || a.points_ != b.points_) {
      return false;
    }
    if (a.labels_.has_value() != b.labels_.has_value()) return false;
    return !a.labels_ || *a.labels_ == *b.labels_;
  }

 private:
  Matrix points_;
  std::optional<Vector> labels_;
  LabelKind kind_ = LabelKind::none;
};

/// K node-local shards plus the source row of every shard row.
struct Partition {
  std::vector<Dataset> shards;
  std::vector<std::vector<std::size_t>> provenance;

  std::size_t k() const noexcept { return shards.size(); }

  std::size_t total_size() const noexcept {
    std::size_t n = 0;
    for (const auto& s : shards) n += s.size();
    return n;
  }

  std::size_t dim() const noexcept { return shards.empty() ? 0 : shards.front().dim(); }

  /// Concatenation of all shards in shard order.
  Dataset pooled() const {
    const std::size_t n = total_size();
    Matrix pts(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim()));
    const bool labelled = !shards.empty() && shards.front().has_labels();
    std::optional<Vector> lab;
    if (labelled) lab = Vector(static_cast<Eigen::Index>(n));
    Eigen::Index r = 0;
    for (const auto& s : shards) {
      pts.middleRows(r, static_cast<Eigen::Index>(s.size())) = s.points();
      if (lab) lab->segment(r, static_cast<Eigen::Index>(s.size())) = s.labels();
      r += static_cast<Eigen::Index>(s.size());
    }
    const LabelKind kind = shards.empty() ? LabelKind::none : shards.front().label_kind();
    return Dataset(std::move(pts), std::move(lab), kind);
  }
};

enum class SplitMode { shuffled_iid, contiguous, by_label_heterogeneous };

struct SplitSpec {
  SplitMode mode = SplitMode::shuffled_iid;
  std::size_t k = 1;
  std::uint64_t seed = 0;
};

enum class ClusterShape { gaussian, uniform_box };

namespace detail {

// Sizes differing by at most one, larger shards first.
inline std::vector<std::size_t> balanced_sizes(std::size_t n, std::size_t k) {
  std::vector<std::size_t> sizes(k, n / k);
  for (std::size_t i = 0; i < n % k; ++i) ++sizes[i];
  return sizes;
}

}  // namespace detail

/// y = a·x + b + ε with x uniform in [-1,1]^dim and ε ~ N(0, noise_sigma²).
/// `true_params` holds (a, b) as one vector of length dim+1.
inline Dataset generate_regression(std::size_t n_points, std::size_t dim, const Vector& true_params,
                                   double noise_sigma, std::uint64_t seed) {
  if (n_points < 1 || dim < 1) throw InvalidArgument("generate_regression needs n_points >= 1 and dim >= 1");
  if (noise_sigma < 0.0 || !std::isfinite(noise_sigma)) {
    throw InvalidArgument("noise_sigma must be finite and >= 0");
  }
  if (static_cast<std::size_t>(true_params.size()) != dim + 1) {
    throw InvalidArgument("true_params must have length dim + 1");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const auto n = static_cast<Eigen::Index>(n_points);
  const auto d = static_cast<Eigen::Index>(dim);
  Matrix x(n, d);
  Vector y(n);
  const auto a = true_params.head(d);
  const double b = true_params(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = unif(rng);
    const double eps = noise_sigma > 0.0 ? noise_sigma * gauss(rng) : 0.0;
    y(i) = x.row(i).dot(a) + b + eps;
  }
  return Dataset(std::move(x), std::move(y), LabelKind::real);
}

/// `per_cluster` points around each center, labelled with the center's index.
/// Gaussian: per-coordinate N(0, spread²) offsets. Uniform box: offsets in (-spread, spread).
inline Dataset generate_clusters(const std::vector<Vector>& centers, double spread, std::size_t per_cluster,
                                 ClusterShape shape, std::uint64_t seed) {
  if (centers.empty()) throw InvalidArgument("generate_clusters needs at least one center");
  if (!(spread > 0.0) || !std::isfinite(spread)) throw InvalidArgument("spread must be finite and > 0");
  const Eigen::Index d = centers.front().size();
  for (const auto& c : centers) {
    if (c.size() != d) throw InvalidArgument("all centers must share one dimension");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, spread);
  std::uniform_real_distribution<double> unif(-spread, spread);

  const auto n = static_cast<Eigen::Index>(centers.size() * per_cluster);
  Matrix x(n, d);
  Vector lab(n);
  Eigen::Index r = 0;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    for (std::size_t p = 0; p < per_cluster; ++p, ++r) {
      for (Eigen::Index j = 0; j < d; ++j) {
        const double off = shape == ClusterShape::gaussian ? gauss(rng) : unif(rng);
        x(r, j) = centers[c](j) + off;
      }
      lab(r) = static_cast<double>(c);
    }
  }
  return Dataset(std::move(x), std::move(lab), LabelKind::integer);
}

inline Partition partition(const Dataset& data, const SplitSpec& spec) {
  const std::size_t n = data.size();
  if (spec.k < 1) throw InvalidArgument("split k must be >= 1");
  if (spec.k > n) {
    throw InvalidArgument("cannot split " + std::to_string(n) + " rows into " + std::to_string(spec.k) +
                          " shards");
  }

  std::vector<std::vector<std::size_t>> groups(spec.k);
  switch (spec.mode) {
    case SplitMode::contiguous:
    case SplitMode::shuffled_iid: {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      if (spec.mode == SplitMode::shuffled_iid && spec.k > 1) {
        std::mt19937_64 rng(spec.seed);
        // std::shuffle's draw sequence differs between standard libraries.
        for (std::size_t i = n; i > 1; --i) {
          const std::size_t j = static_cast<std::size_t>(rng() % i);
          std::swap(order[i - 1], order[j]);
        }
      }
      const auto sizes = detail::balanced_sizes(n, spec.k);
      std::size_t pos = 0;
      for (std::size_t s = 0; s < spec.k; ++s) {
        groups[s].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                         order.begin() + static_cast<std::ptrdiff_t>(pos + sizes[s]));
        pos += sizes[s];
      }
      break;
    }
    case SplitMode::by_label_heterogeneous: {
      if (!data.has_labels()) throw InvalidArgument("by-label split needs a labelled dataset");
      std::map<double, std::vector<std::size_t>> by_label;
      for (std::size_t i = 0; i < n; ++i) by_label[data.labels()(static_cast<Eigen::Index>(i))].push_back(i);
      if (by_label.size() < spec.k) {
        throw InvalidArgument("by-label split has " + std::to_string(by_label.size()) +
                              " label groups for " + std::to_string(spec.k) + " shards");
      }
      std::size_t g = 0;
      for (auto& [label, rows] : by_label) {
        auto& dst = groups[g % spec.k];
        dst.insert(dst.end(), rows.begin(), rows.end());
        ++g;
      }
      for (auto& grp : groups) std::sort(grp.begin(), grp.end());
      break;
    }
  }

  Partition out;
  out.shards.reserve(spec.k);
  for (auto& grp : groups) out.shards.push_back(data.subset(grp));
  out.provenance = std::move(groups);
  return out;
}

}  // namespace dml
