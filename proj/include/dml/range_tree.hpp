#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

#include "dml/error.hpp"
#include "dml/linalg.hpp"

namespace dml {

/// max_d w_d·|x_d − c_d|.
template <typename X, typename C, typename W>
double weighted_linf_dist(const Eigen::MatrixBase<X>& x, const Eigen::MatrixBase<C>& c,
                          const Eigen::MatrixBase<W>& w) {
  if (x.size() != c.size() || x.size() != w.size()) throw InvalidArgument("weighted_linf_dist: dimension mismatch");
  double m = 0.0;
  for (Eigen::Index d = 0; d < x.size(); ++d) m = std::max(m, w(d) * std::abs(x(d) - c(d)));
  return m;
}

/// Axis-aligned box in weighted ℓ∞ form: x is inside iff
/// max_d w_d·|x_d − c_d| < r. Half-width along d is r / w_d.
struct Window {
  Vector center;
  double radius = 1.0;
  Vector weights;
  std::size_t cardinality = 0;

  static Window cube(Vector center, double radius) {
    const auto n = center.size();
    return Window{std::move(center), radius, Vector::Ones(n), 0};
  }

  std::size_t dim() const noexcept { return static_cast<std::size_t>(center.size()); }

  template <typename X>
  bool contains(const Eigen::MatrixBase<X>& x) const {
    return weighted_linf_dist(x, center, weights) < radius;
  }

  Vector half_widths() const { return (radius / weights.array()).matrix(); }

  void validate() const {
    if (!(radius > 0.0)) throw InvalidArgument("window radius must be > 0");
    if (weights.size() != center.size()) throw InvalidArgument("window weights/center dimension mismatch");
    for (Eigen::Index d = 0; d < weights.size(); ++d) {
      if (!(weights(d) > 0.0)) throw InvalidArgument("window weights must be > 0");
    }
  }
};

/// k-d tree over the rows of a point matrix, answering "which points lie in
/// this window" exactly as a linear scan of Window::contains would.
class RangeTree {
 public:
  static constexpr std::size_t kLeafSize = 16;

  struct Node {
    // Leaf when left == right == -1.
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::size_t split_dim = 0;
    double split_value = 0.0;
    std::size_t begin = 0;
    std::size_t end = 0;
    Vector lo;
    Vector hi;
  };

  RangeTree() = default;

  explicit RangeTree(Matrix points) : points_(std::move(points)) {
    index_.resize(static_cast<std::size_t>(points_.rows()));
    std::iota(index_.begin(), index_.end(), std::size_t{0});
    if (!index_.empty()) build(0, index_.size());
  }

  std::size_t size() const noexcept { return index_.size(); }
  const Matrix& points() const noexcept { return points_; }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  /// Point ids in leaf order; a leaf owns index()[begin, end).
  const std::vector<std::size_t>& index() const noexcept { return index_; }

  /// Sorted ids of all points inside `w`.
  std::vector<std::size_t> query(const Window& w) const {
    if (static_cast<Eigen::Index>(w.dim()) != points_.cols()) {
      throw InvalidArgument("range query: window dimension does not match the tree");
    }
    std::vector<std::size_t> out;
    if (!nodes_.empty()) visit(0, w, out);
    std::sort(out.begin(), out.end());
    return out;
  }

  std::size_t count(const Window& w) const { return query(w).size(); }

 private:
  std::int32_t build(std::size_t begin, std::size_t end) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(Node{});
    Vector lo = points_.row(static_cast<Eigen::Index>(index_[begin])).transpose();
    Vector hi = lo;
    for (std::size_t i = begin + 1; i < end; ++i) {
      const auto row = points_.row(static_cast<Eigen::Index>(index_[i])).transpose();
      lo = lo.cwiseMin(row);
      hi = hi.cwiseMax(row);
    }

    Node node;
    node.begin = begin;
    node.end = end;
    if (end - begin > kLeafSize) {
      Eigen::Index dim = 0;
      (hi - lo).maxCoeff(&dim);
      const std::size_t mid = begin + (end - begin) / 2;
      std::nth_element(index_.begin() + static_cast<std::ptrdiff_t>(begin),
                       index_.begin() + static_cast<std::ptrdiff_t>(mid),
                       index_.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                         const double va = points_(static_cast<Eigen::Index>(a), dim);
                         const double vb = points_(static_cast<Eigen::Index>(b), dim);
                         return va < vb || (va == vb && a < b);
                       });
      node.split_dim = static_cast<std::size_t>(dim);
      node.split_value = points_(static_cast<Eigen::Index>(index_[mid]), dim);
      node.left = build(begin, mid);
      node.right = build(mid, end);
    }
    node.lo = std::move(lo);
    node.hi = std::move(hi);
    nodes_[static_cast<std::size_t>(id)] = std::move(node);
    return id;
  }

  // A subtree is skipped when some dimension's bounding interval lies wholly
  // at weighted distance >= r. Floating subtraction is monotone, so every
  // point inside would fail the same test.
  static bool disjoint(const Node& node, const Window& w) {
    for (Eigen::Index d = 0; d < w.center.size(); ++d) {
      const double c = w.center(d);
      double gap = 0.0;
      if (c < node.lo(d)) gap = node.lo(d) - c;
      else if (c > node.hi(d)) gap = c - node.hi(d);
      if (w.weights(d) * gap >= w.radius) return true;
    }
    return false;
  }

  void visit(std::int32_t id, const Window& w, std::vector<std::size_t>& out) const {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (disjoint(node, w)) return;
    if (node.left < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const std::size_t p = index_[i];
        if (w.contains(points_.row(static_cast<Eigen::Index>(p)).transpose())) out.push_back(p);
      }
      return;
    }
    visit(node.left, w, out);
    visit(node.right, w, out);
  }

  Matrix points_;
  std::vector<std::size_t> index_;
  std::vector<Node> nodes_;
};

}  // namespace dml
