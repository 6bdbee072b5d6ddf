// Acceptance checks: one PASS/FAIL line per check, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "dml/channel.hpp"
#include "dml/clustering.hpp"
#include "dml/coordinator.hpp"
#include "dml/data.hpp"
#include "dml/gp.hpp"
#include "dml/learners.hpp"
#include "dml/range_tree.hpp"
#include "dml/server.hpp"
#include "dml/transport.hpp"

using namespace dml;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("[%s] %2d %-34s %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = u(rng);
  return v;
}

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = u(rng);
  }
  return m;
}

std::vector<std::size_t> all_rows(const Dataset& d) {
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

UpdatePolicy full_gradient(double step, std::size_t epochs = 1) {
  UpdatePolicy p;
  p.step_size = step;
  p.epochs = epochs;
  return p;
}

// F^(k): epochs of proximal gradient on shard k with λ scaled by N_k/N.
Theta apply_f(const Partition& part, std::size_t k, const Objective& obj, const UpdatePolicy& pol, Theta theta) {
  const Dataset& shard = part.shards[k];
  const double share = static_cast<double>(shard.size()) / static_cast<double>(part.total_size());
  const Objective local{obj.loss, obj.regularizer, obj.lambda * share};
  const auto rows = all_rows(shard);
  for (std::size_t e = 0; e < pol.epochs; ++e) theta = proximal_step(local, theta, shard, rows, pol.step_size);
  return theta;
}

// Dense SE covariance computed directly from the formula.
Matrix se_cov(const Matrix& a, const Matrix& b, double ell, double s2) {
  Matrix k(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      k(i, j) = s2 * std::exp(-(a.row(i) - b.row(j)).squaredNorm() / (2.0 * ell * ell));
    }
  }
  return k;
}

// Exhaustive k-means optimum: every labelling with all clusters nonempty.
double enumerate_kmeans(const Matrix& x, std::size_t k) {
  const auto n = static_cast<std::size_t>(x.rows());
  std::vector<std::size_t> label(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<std::size_t> count(k, 0);
    for (auto l : label) ++count[l];
    if (std::all_of(count.begin(), count.end(), [](std::size_t c) { return c > 0; })) {
      double cost = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        Vector mean = Vector::Zero(x.cols());
        for (std::size_t i = 0; i < n; ++i) {
          if (label[i] == c) mean += x.row(static_cast<Eigen::Index>(i)).transpose();
        }
        mean /= static_cast<double>(count[c]);
        for (std::size_t i = 0; i < n; ++i) {
          if (label[i] == c) cost += (x.row(static_cast<Eigen::Index>(i)).transpose() - mean).squaredNorm();
        }
      }
      best = std::min(best, cost);
    }
    std::size_t pos = 0;
    while (pos < n && ++label[pos] == k) label[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

Outcome exact_aggregation() {
  double worst = 0.0;
  double slowest = 0.0;
  const Vector truth = (Vector(6) << 1.5, -2.0, 0.5, 3.0, -0.75, 0.25).finished();
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto start = Clock::now();
    const Dataset d = generate_regression(200, 5, truth, 0.1, seed);
    const Partition part = partition(d, {SplitMode::shuffled_iid, 4, seed + 100});
    const Theta agg = aggregate_second_order(part);
    slowest = std::max(slowest, seconds_since(start));
    const Theta pooled = normal_equations(Objective{}, part.pooled());
    worst = std::max(worst, (agg.values() - pooled.values()).lpNorm<Eigen::Infinity>());
  }
  return {worst <= 1e-8 && slowest < 1.0, fmt("max linf %.3g (<= 1e-8), slowest seed %.3g s (< 1 s)", worst, slowest)};
}

struct CompositionSetup {
  Dataset data;
  Partition part;
  Objective obj{LossKind::squared, Regularizer::l1, 0.5};
  UpdatePolicy pol = full_gradient(0.004, 2);

  CompositionSetup()
      : data(generate_regression(90, 3, (Vector(4) << 1.0, 0.0, -2.0, 0.5).finished(), 0.2, 31)),
        part(partition(data, {SplitMode::shuffled_iid, 3, 7})) {}
};

Outcome composition_equivalence() {
  const CompositionSetup s;
  const Trace trace = run_schedule(s.part, s.obj, s.pol, Schedule::round_robin(3), ExecutionMode::serialized(), 12);
  Theta theta = Theta::zeros(3);
  for (std::size_t t = 0; t < 12; ++t) theta = apply_f(s.part, t % 3, s.obj, s.pol, theta);
  const double diff = (trace.final_theta().values() - theta.values()).lpNorm<Eigen::Infinity>();
  return {diff <= 1e-12, fmt("linf %.3g (<= 1e-12) after T=12, K=3", diff)};
}

Outcome degenerate_equivalence() {
  const CompositionSetup s;
  const Partition one = partition(s.data, {SplitMode::contiguous, 1, 0});
  const std::size_t t_total = 25;
  const Trace trace =
      run_schedule(one, s.obj, s.pol, Schedule::round_robin(1), ExecutionMode::serialized(), t_total);
  Theta theta = Theta::zeros(3);
  const auto rows = all_rows(s.data);
  for (std::size_t t = 0; t < t_total * s.pol.epochs; ++t) {
    theta = proximal_step(s.obj, theta, s.data, rows, s.pol.step_size);
  }
  const bool identical = trace.final_theta() == theta;
  return {identical, identical ? "bit-identical after T=25" : "trajectories differ"};
}

Outcome async_convergence() {
  const auto start = Clock::now();
  const Vector truth = (Vector(6) << 1.0, -2.0, 0.5, 0.25, -1.0, 0.7).finished();
  const Dataset d = generate_regression(400, 5, truth, 0.01, 17);
  const Objective ridge{LossKind::squared, Regularizer::l2, 0.1};
  const Theta star = normal_equations(ridge, d);
  const Partition part = partition(d, {SplitMode::shuffled_iid, 4, 1});
  const UpdatePolicy pol = full_gradient(default_step_size(ridge, d));
  const DelayModel delay{DelayModel::Kind::uniform, 0.0, 0.5, 1.5, 5};
  const Trace trace =
      run_schedule(part, ridge, pol, Schedule::uniform(4, 99), ExecutionMode::overlapped(delay), 10000);
  const double gap = (trace.final_theta().values() - star.values()).norm();
  const double secs = seconds_since(start);
  return {gap <= 1e-3 && secs < 10.0, fmt("||theta_T - theta*|| = %.3g (<= 1e-3), %.2f s (< 10 s)", gap, secs)};
}

Outcome schedule_positivity() {
  bool rejected = false;
  try {
    Schedule::async_random({0.5, 0.0, 0.5}, 1);
  } catch (const InvalidArgument&) {
    rejected = true;
  }
  const std::vector<double> probs{0.1, 0.2, 0.3, 0.4};
  auto sampler = Schedule::async_random(probs, 2024).sampler();
  std::vector<double> counts(4, 0.0);
  const int total = 10000;
  for (int i = 0; i < total; ++i) ++counts[sampler.next()];
  double chi2 = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    const double expected = probs[k] * total;
    chi2 += (counts[k] - expected) * (counts[k] - expected) / expected;
  }
  // 3 degrees of freedom, p = 0.01.
  const double threshold = 11.3449;
  return {rejected && chi2 < threshold,
          std::string(rejected ? "zero prob rejected" : "zero prob ACCEPTED") + fmt(", chi2 %.3f (< %.4f)", chi2, threshold)};
}

Outcome linearizability() {
  ParameterServer server(Theta::zeros(1));
  const int threads = 8;
  const int pushes = 100;
  struct Seen {
    std::uint64_t t;
    Theta pushed;
    Theta returned;
  };
  std::vector<std::vector<Seen>> seen(threads);
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (int i = 0; i < pushes; ++i) {
        Theta th(Vector::Constant(2, w * 1000.0 + i));
        Reply r = server.push_swap(static_cast<std::uint32_t>(w), th);
        seen[static_cast<std::size_t>(w)].push_back({r.t, std::move(th), std::move(r.theta)});
      }
    });
  }
  for (auto& t : pool) t.join();

  const auto log = server.log();
  bool ok = server.t() == threads * pushes && log.size() == static_cast<std::size_t>(threads * pushes + 1);
  std::set<std::uint64_t> ts;
  for (const auto& per : seen) {
    std::uint64_t prev = 0;
    for (const auto& s : per) {
      ok = ok && s.t > prev && s.t < log.size() && ts.insert(s.t).second;
      ok = ok && log[s.t] == s.pushed && log[s.t - 1] == s.returned;
      prev = s.t;
    }
  }
  ok = ok && ts.size() == static_cast<std::size_t>(threads * pushes);
  return {ok, "t = " + std::to_string(server.t()) + " (expect 800), replay " + (ok ? "consistent" : "INCONSISTENT")};
}

Outcome transport_conformance() {
  const CompositionSetup s;
  const Trace local = run_schedule(s.part, s.obj, s.pol, Schedule::round_robin(3), ExecutionMode::serialized(), 12);
  ParameterServer server(Theta::zeros(3));
  TcpServer host(server);
  TcpEndpoint ep("127.0.0.1", host.port());
  RunOptions opts;
  opts.endpoint = &ep;
  const Trace remote =
      run_schedule(s.part, s.obj, s.pol, Schedule::round_robin(3), ExecutionMode::serialized(), 12, opts);
  ep.shutdown_server();
  host.stop();
  const bool same = same_trajectory(local, remote);
  return {same, same ? "in-process and TCP traces identical" : "traces differ"};
}

gp::Prediction combine_rule(gp::RuleKind kind, const std::vector<gp::Prediction>& experts, std::vector<double> betas,
                            double prior_var) {
  return gp::combine(experts, gp::CombinationRule{kind, std::move(betas), prior_var});
}

double pred_diff(const gp::Prediction& a, const gp::Prediction& b) {
  const double dm = std::abs(a.mu - b.mu) / std::max(1.0, std::abs(b.mu));
  const double dv = std::abs(a.var - b.var) / std::max(1.0, std::abs(b.var));
  return std::max(dm, dv);
}

Outcome gp_identities() {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> mu(-3.0, 3.0);
  std::uniform_real_distribution<double> var(0.05, 2.0);
  std::uniform_int_distribution<int> size(2, 6);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const double prior = var(rng) + 2.0;
    const gp::Prediction single{mu(rng), var(rng)};
    for (auto kind : {gp::RuleKind::poe, gp::RuleKind::gpoe, gp::RuleKind::bcm, gp::RuleKind::gbcm}) {
      worst = std::max(worst, pred_diff(combine_rule(kind, {single}, {}, prior), single));
    }

    const int k = size(rng);
    std::vector<gp::Prediction> experts;
    for (int i = 0; i < k; ++i) experts.push_back({mu(rng), var(rng)});
    std::vector<double> ones(static_cast<std::size_t>(k), 1.0);
    Vector raw = random_vector(rng, k, 0.1, 1.0);
    raw /= raw.sum();
    const std::vector<double> normalized(raw.data(), raw.data() + raw.size());

    worst = std::max(worst, pred_diff(combine_rule(gp::RuleKind::gpoe, experts, ones, prior),
                                      combine_rule(gp::RuleKind::poe, experts, {}, prior)));
    worst = std::max(worst, pred_diff(combine_rule(gp::RuleKind::gbcm, experts, normalized, prior),
                                      combine_rule(gp::RuleKind::gpoe, experts, normalized, prior)));
    worst = std::max(worst, pred_diff(combine_rule(gp::RuleKind::bcm, experts, {}, prior),
                                      combine_rule(gp::RuleKind::gbcm, experts, ones, prior)));
  }
  return {worst <= 1e-12, fmt("max relative deviation %.3g (<= 1e-12) over 100 trials", worst)};
}

Outcome prior_fallback() {
  std::mt19937_64 rng(77);
  const Matrix x = random_matrix(rng, 60, 2, -1.0, 1.0);
  Vector y(60);
  for (Eigen::Index i = 0; i < 60; ++i) y(i) = std::sin(3.0 * x(i, 0)) + x(i, 1);
  const Dataset d(x, y, LabelKind::real);
  const gp::Kernel kernel{0.4, 1.7, 0.01, 0.0};
  const double sigma0 = kernel.signal_variance;
  const Vector far_offsets = (Vector(2) << 10.0, 25.0).finished();
  double worst = 0.0;
  int checks = 0;
  for (std::size_t k : {1u, 3u}) {
    const Partition part = partition(d, {SplitMode::shuffled_iid, k, 5});
    std::vector<gp::Model> experts;
    for (const auto& s : part.shards) experts.push_back(gp::fit(s, kernel));
    const double kk = static_cast<double>(k);
    // Rules whose betas sum to one. poe and bcm qualify only when K = 1.
    std::vector<gp::CombinationRule> rules{{gp::RuleKind::gpoe, std::vector<double>(k, 1.0 / kk), sigma0},
                                           {gp::RuleKind::gbcm, std::vector<double>(k, 1.0 / kk), sigma0}};
    if (k == 1) {
      rules.push_back({gp::RuleKind::poe, {}, sigma0});
      rules.push_back({gp::RuleKind::bcm, {}, sigma0});
    }
    for (double off : far_offsets) {
      // Every test point is at least `off` lengthscales from the data box [-1, 1]^2.
      const Vector x_star = (Vector(2) << 1.0 + off * kernel.lengthscale, -1.0 - off * kernel.lengthscale).finished();
      for (const auto& rule : rules) {
        const gp::Prediction p = gp::committee_predict(experts, x_star, rule);
        worst = std::max(worst, std::abs(p.mu - kernel.prior_mean) / sigma0);
        worst = std::max(worst, std::abs(p.var - sigma0) / sigma0);
        ++checks;
      }
    }
  }
  return {worst <= 1e-6, fmt("max relative deviation %.3g (<= 1e-6) over %g rule/point pairs", worst, checks)};
}

Outcome gp_numerics() {
  std::mt19937_64 rng(1010);
  const Matrix x = random_matrix(rng, 30, 3, -2.0, 2.0);
  Vector y(30);
  for (Eigen::Index i = 0; i < 30; ++i) y(i) = std::cos(x(i, 0)) * x(i, 1) - 0.3 * x(i, 2);
  const gp::Kernel kernel{1.1, 0.9, 0.02, 0.25};
  const gp::Model m = gp::fit(x, y, kernel);

  Matrix kxx = se_cov(x, x, kernel.lengthscale, kernel.signal_variance);
  kxx.diagonal().array() += kernel.noise_variance;
  const Matrix inv = kxx.inverse();
  const Vector centred = (y.array() - kernel.prior_mean).matrix();
  const double det = kxx.determinant();
  const double lml_dense = -0.5 * centred.dot(inv * centred) - 0.5 * std::log(det) -
                           0.5 * 30.0 * std::log(2.0 * std::numbers::pi);
  double worst = std::abs(gp::log_marginal_likelihood(m) - lml_dense);

  const Matrix tests = random_matrix(rng, 20, 3, -2.5, 2.5);
  for (Eigen::Index t = 0; t < tests.rows(); ++t) {
    const Matrix ks = se_cov(tests.row(t), x, kernel.lengthscale, kernel.signal_variance);
    const double mu = kernel.prior_mean + (ks * inv * centred)(0);
    const double var = kernel.signal_variance - (ks * inv * ks.transpose())(0, 0);
    const gp::Prediction p = gp::predict(m, tests.row(t).transpose());
    worst = std::max({worst, std::abs(p.mu - mu), std::abs(p.var - var)});
  }
  return {worst <= 1e-8, fmt("max abs deviation %.3g (<= 1e-8) on N=30", worst)};
}

Outcome range_search() {
  std::mt19937_64 rng(55);
  std::size_t mismatches = 0;
  std::size_t hits = 0;
  for (Eigen::Index n : {2, 5, 10}) {
    const Matrix pts = random_matrix(rng, 10000, n, -1.0, 1.0);
    const RangeTree tree(pts);
    std::uniform_real_distribution<double> radius(0.05, 0.8);
    for (int q = 0; q < 100; ++q) {
      const Window w{random_vector(rng, n, -1.2, 1.2), radius(rng), random_vector(rng, n, 0.5, 2.0), 0};
      std::vector<std::size_t> scan;
      for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        if (w.contains(pts.row(i).transpose())) scan.push_back(static_cast<std::size_t>(i));
      }
      std::vector<std::size_t> got = tree.query(w);
      std::sort(got.begin(), got.end());
      if (got != scan) ++mismatches;
      hits += scan.size();
    }
  }
  return {mismatches == 0,
          std::to_string(mismatches) + " mismatching windows of 300 (" + std::to_string(hits) + " points matched)"};
}

Outcome kmeans_optimality() {
  std::mt19937_64 rng(1212);
  int matched = 0;
  double worst = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    const Matrix x = random_matrix(rng, 8, 2, 0.0, 10.0);
    const Dataset d(x, std::nullopt, LabelKind::none);
    KMeansOptions opts;
    opts.seed = 500 + static_cast<std::uint64_t>(inst);
    const ClusterModel m = kmeans_best_of(d, 3, 10, opts);
    const double opt = enumerate_kmeans(x, 3);
    const double rel = (m.objective - opt) / opt;
    worst = std::max(worst, rel);
    if (rel <= 1e-9) ++matched;
  }
  return {matched == 20, std::to_string(matched) + "/20 instances at the enumerated optimum (K=3)" +
                             fmt(", worst relative excess %.3g", worst)};
}

KWindowsConfig two_cluster_config() {
  KWindowsConfig cfg;
  cfg.k_init = 6;
  cfg.radius = 1.0;
  cfg.enlarge_step = 0.3;
  cfg.seed = 13;
  return cfg;
}

Dataset two_clusters() {
  const std::vector<Vector> centers{(Vector(2) << 0.0, 0.0).finished(), (Vector(2) << 10.0, 0.0).finished()};
  return generate_clusters(centers, 0.5, 100, ClusterShape::gaussian, 8);
}

Outcome kwindows_end_to_end() {
  const Dataset d = two_clusters();
  const KWindowsConfig cfg = two_cluster_config();
  const ClusterModel central = kwindows(d, cfg);
  const double agree = label_agreement(central.assignment, d.labels());

  const Partition part = partition(d, {SplitMode::shuffled_iid, 3, 21});
  SummaryChannel<WindowSummary> channel;
  const DistributedKWindows dist = distributed_kwindows(part, cfg, &channel);
  const double dist_agree = label_agreement(dist.merged.assignment, part.pooled().labels());
  static_assert(std::is_same_v<std::remove_cvref_t<decltype(channel.messages().front().message)>, WindowSummary>);
  // Center and weights (D each), radius and cardinality per window.
  const std::size_t expected_reals = channel.messages().size() * (2 * 2 + 2);
  const bool summaries_only = !channel.messages().empty() && channel.reals_sent() == expected_reals;

  const bool ok = central.windows.size() == 2 && agree >= 0.95 && dist.merged.windows.size() == 2 &&
                  dist_agree >= 0.95 && summaries_only;
  char buf[200];
  std::snprintf(buf, sizeof buf, "central %zu windows, agreement %.3f; distributed %zu windows, agreement %.3f, %zu summaries",
                central.windows.size(), agree, dist.merged.windows.size(), dist_agree, channel.messages().size());
  return {ok, buf};
}

Outcome privacy_surface() {
  static_assert(is_summary_message_v<SecondOrderStats>);
  static_assert(is_summary_message_v<WindowSummary>);
  static_assert(!is_summary_message_v<Dataset>);
  static_assert(!is_summary_message_v<Matrix>);
  static_assert(!is_summary_message_v<Vector>);

  // Message sizes depend on the dimension only, never on how many rows a node holds.
  const Vector truth = (Vector(4) << 1.0, 2.0, -1.0, 0.5).finished();
  bool ok = true;
  for (std::size_t n : {40u, 400u}) {
    const Partition part = partition(generate_regression(n, 3, truth, 0.1, 3), {SplitMode::contiguous, 4, 0});
    SummaryChannel<SecondOrderStats> ch;
    aggregate_second_order(part, &ch);
    for (std::uint32_t node = 0; node < 4; ++node) ok = ok && ch.reals_sent_by(node) == 16 + 4;
  }

  const Partition part = partition(two_clusters(), {SplitMode::shuffled_iid, 3, 21});
  SummaryChannel<WindowSummary> ch;
  distributed_kwindows(part, two_cluster_config(), &ch);
  for (const auto& env : ch.messages()) ok = ok && env.message.wire_reals() == 6;
  return {ok, ok ? "channels typed to summary messages; payload sizes independent of shard size"
                 : "a channel carried a payload that scales with the data"};
}

}  // namespace

int main() {
  report(1, "exact aggregation", exact_aggregation);
  report(2, "composition equivalence", composition_equivalence);
  report(3, "degenerate equivalence", degenerate_equivalence);
  report(4, "asynchronous convergence", async_convergence);
  report(5, "schedule positivity", schedule_positivity);
  report(6, "linearizability", linearizability);
  report(7, "transport conformance", transport_conformance);
  report(8, "GP combination identities", gp_identities);
  report(9, "GP prior fallback", prior_fallback);
  report(10, "GP numerics", gp_numerics);
  report(11, "range search", range_search);
  report(12, "k-means optimality", kmeans_optimality);
  report(13, "k-windows end to end", kwindows_end_to_end);
  report(14, "privacy surface", privacy_surface);
  std::printf("%d of 14 criteria passed\n", 14 - failures);
  return failures == 0 ? 0 : 1;
}
