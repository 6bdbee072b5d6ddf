#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <map>
#include <set>
#include <thread>

#include "dml/coordinator.hpp"

using namespace dml;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

UpdatePolicy full(double step, std::size_t epochs = 1) {
  UpdatePolicy p;
  p.step_size = step;
  p.epochs = epochs;
  return p;
}

// Pooled least squares via QR on the augmented design.
Vector pooled_ls(const Dataset& d) {
  return augmented(d.points()).colPivHouseholderQr().solve(d.labels());
}

}  // namespace

TEST(ParameterServer, PullOnFreshServer) {
  const Theta init(vec({1, 2, 3}));
  ParameterServer s(init);
  const Reply r = s.pull(5);
  EXPECT_TRUE(r.theta == init);
  EXPECT_EQ(r.t, 0u);
  const Reply again = s.pull(5);
  EXPECT_TRUE(again.theta == r.theta);
  EXPECT_EQ(again.t, r.t);
  EXPECT_EQ(s.t(), 0u);
}

TEST(ParameterServer, SwapReturnsPrevious) {
  const Theta init(vec({0, 0}));
  const Theta p(vec({1, 1}));
  const Theta q(vec({2, 2}));
  ParameterServer s(init);
  const Reply r1 = s.push_swap(0, p);
  EXPECT_TRUE(r1.theta == init);
  EXPECT_EQ(r1.t, 1u);
  const Reply pulled = s.pull(1);
  EXPECT_TRUE(pulled.theta == p);
  EXPECT_EQ(pulled.t, 1u);
  const Reply r2 = s.push_swap(1, q);
  EXPECT_TRUE(r2.theta == p);
  EXPECT_EQ(r2.t, 2u);
  const auto log = s.log();
  ASSERT_EQ(log.size(), 3u);
  EXPECT_TRUE(log[0] == init);
  EXPECT_TRUE(log[2] == q);
}

TEST(ParameterServer, RejectsWrongDimensionWithoutStateChange) {
  ParameterServer s(Theta::zeros(2));
  EXPECT_THROW(s.push_swap(0, Theta::zeros(3)), InvalidArgument);
  EXPECT_EQ(s.t(), 0u);
  EXPECT_EQ(s.log().size(), 1u);
}

// Every pushed value appears exactly once, t advanced by the push count, and
// each returned value is the log entry just before the pushed one.
TEST(ParameterServer, ConcurrentPushesAreLinearizable) {
  constexpr int kThreads = 8;
  constexpr int kPushes = 500;
  ParameterServer s(Theta(vec({-1.0, -1.0})));
  std::atomic<int> pushed{0};
  std::vector<std::vector<std::pair<double, double>>> seen(kThreads);
  std::vector<std::thread> workers;
  for (int w = 0; w < kThreads; ++w) {
    workers.emplace_back([&, w] {
      for (int i = 0; i < kPushes; ++i) {
        const double tag = w * kPushes + i;
        const Reply r = s.push_swap(static_cast<std::uint32_t>(w), Theta(vec({tag, static_cast<double>(w)})));
        seen[static_cast<std::size_t>(w)].emplace_back(tag, r.theta.values()(0));
        pushed.fetch_add(1);
      }
    });
  }
  for (auto& t : workers) t.join();

  ASSERT_EQ(s.t(), static_cast<std::uint64_t>(pushed.load()));
  const auto log = s.log();
  std::map<double, std::size_t> position;
  for (std::size_t i = 1; i < log.size(); ++i) {
    ASSERT_TRUE(position.emplace(log[i].values()(0), i).second) << "duplicate log entry";
  }
  ASSERT_EQ(position.size(), static_cast<std::size_t>(kThreads * kPushes));
  for (const auto& per : seen) {
    for (const auto& [tag, returned] : per) {
      const std::size_t pos = position.at(tag);
      EXPECT_EQ(log[pos - 1].values()(0), returned);
    }
  }
}

TEST(Schedule, Validation) {
  EXPECT_THROW(Schedule::round_robin(0), InvalidArgument);
  EXPECT_THROW(Schedule::async_random({0.5, 0.5, 0.0}, 1), InvalidArgument);
  EXPECT_THROW(Schedule::async_random({0.5, 0.6}, 1), InvalidArgument);
  EXPECT_THROW(Schedule::async_random({}, 1), InvalidArgument);
  EXPECT_NO_THROW(Schedule::async_random({0.2, 0.3, 0.5}, 1));
}

TEST(Schedule, RoundRobinCycles) {
  auto s = Schedule::round_robin(3).sampler();
  for (int i = 0; i < 9; ++i) EXPECT_EQ(s.next(), static_cast<std::uint32_t>(i % 3));
}

// Pearson chi-square against the 1% critical value of chi-square with 3
// degrees of freedom (11.3449).
TEST(Schedule, AsyncFrequenciesMatchProbabilities) {
  const std::vector<double> probs{0.1, 0.2, 0.3, 0.4};
  auto s = Schedule::async_random(probs, 2024).sampler();
  constexpr int kDraws = 10000;
  std::vector<int> counts(4, 0);
  for (int i = 0; i < kDraws; ++i) ++counts[s.next()];
  double chi2 = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double expected = probs[i] * kDraws;
    chi2 += (counts[i] - expected) * (counts[i] - expected) / expected;
  }
  EXPECT_LT(chi2, 11.3449);
}

TEST(Schedule, SeedDeterminesSequence) {
  const auto sched = Schedule::uniform(5, 42);
  auto a = sched.sampler();
  auto b = sched.sampler();
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
}

class Engine : public ::testing::Test {
 protected:
  Dataset data = generate_regression(60, 3, vec({1.0, -0.5, 2.0, 0.3}), 0.2, 31);
  Objective obj{LossKind::squared, Regularizer::l2, 0.5};
};

TEST_F(Engine, SingleNodeIsRepeatedApplication) {
  const auto part = partition(data, {SplitMode::contiguous, 1, 0});
  const UpdatePolicy pol = full(0.005, 2);
  const auto trace = run_schedule(part, obj, pol, Schedule::round_robin(1), ExecutionMode::serialized(), 7);
  const auto learners = make_learners(part, obj, pol);
  Theta th = Theta::zeros(3);
  for (int i = 0; i < 7; ++i) th = local_update(learners[0], th);
  EXPECT_TRUE(trace.final_theta() == th);
  ASSERT_TRUE(trace.terminal[0].has_value());
  EXPECT_TRUE(*trace.terminal[0] == th);
}

TEST_F(Engine, RoundRobinEqualsExplicitComposition) {
  const auto part = partition(data, {SplitMode::shuffled_iid, 3, 5});
  const UpdatePolicy pol = full(0.01);
  const auto trace = run_schedule(part, obj, pol, Schedule::round_robin(3), ExecutionMode::serialized(), 6);

  // F^(k) built by hand: per-shard λ scaled by shard share of the pooled rows.
  Theta th = Theta::zeros(3);
  for (int c = 0; c < 6; ++c) {
    const auto k = static_cast<std::size_t>(c % 3);
    const Objective local{obj.loss, obj.regularizer, obj.lambda * 20.0 / 60.0};
    const Learner f{local, std::make_shared<const Dataset>(part.shards[k]), pol};
    th = local_update(f, th);
  }
  EXPECT_TRUE(trace.final_theta() == th);

  ASSERT_EQ(trace.records.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(trace.records[i].t, i + 1);
    EXPECT_EQ(trace.records[i].node_id, i % 3);
    EXPECT_EQ(trace.records[i].base_t, i);
    if (i > 0) {
      EXPECT_TRUE(trace.records[i].theta_returned == trace.records[i - 1].theta_pushed);
    }
  }
}

TEST_F(Engine, ScheduleMismatchAndZeroContacts) {
  const auto part = partition(data, {SplitMode::contiguous, 2, 0});
  EXPECT_THROW(run_schedule(part, obj, full(0.01), Schedule::round_robin(3), ExecutionMode::serialized(), 3),
               InvalidArgument);
  EXPECT_THROW(run_schedule(part, obj, full(0.01), Schedule::round_robin(2), ExecutionMode::serialized(), 0),
               InvalidArgument);
}

TEST_F(Engine, DeterministicGivenSeeds) {
  const auto part = partition(data, {SplitMode::shuffled_iid, 4, 2});
  UpdatePolicy pol = full(0.01, 1);
  pol.mode = UpdateMode::stochastic_minibatch;
  pol.batch_size = 5;
  pol.seed = 3;
  const auto mode = ExecutionMode::overlapped({DelayModel::Kind::uniform, 0.0, 0.5, 2.0, 9});
  const auto a = run_schedule(part, obj, pol, Schedule::uniform(4, 8), mode, 50);
  const auto b = run_schedule(part, obj, pol, Schedule::uniform(4, 8), mode, 50);
  EXPECT_TRUE(same_trajectory(a, b));
  const auto c = run_schedule(part, obj, pol, Schedule::uniform(4, 9), mode, 50);
  EXPECT_FALSE(same_trajectory(a, c));
}

// Each overlapped push is F applied to the server's θ at the recorded base_t,
// and base_t is the node's previous contact point.
TEST_F(Engine, OverlappedPushesUseStaleBase) {
  const auto part = partition(data, {SplitMode::shuffled_iid, 3, 4});
  const UpdatePolicy pol = full(0.01);
  ParameterServer server(Theta::zeros(3));
  InProcessEndpoint ep(server);
  RunOptions opts;
  opts.endpoint = &ep;
  const auto mode = ExecutionMode::overlapped({DelayModel::Kind::uniform, 0.0, 0.1, 3.0, 1});
  const auto trace = run_schedule(part, obj, pol, Schedule::uniform(3, 6), mode, 40, opts);
  const auto log = server.log();
  const auto learners = make_learners(part, obj, pol);
  ASSERT_EQ(log.size(), 41u);
  EXPECT_EQ(trace.pulls.size(), 3u);

  std::map<std::uint32_t, std::uint64_t> last_contact;
  for (const auto& p : trace.pulls) last_contact[p.node_id] = p.t;
  bool saw_stale = false;
  for (const auto& r : trace.records) {
    EXPECT_TRUE(log[r.t] == r.theta_pushed);
    EXPECT_TRUE(local_update(learners[r.node_id], log[r.base_t]) == r.theta_pushed);
    EXPECT_TRUE(r.theta_returned == log[r.t - 1]);
    ASSERT_TRUE(last_contact.count(r.node_id));
    EXPECT_EQ(r.base_t, last_contact[r.node_id]);
    last_contact[r.node_id] = r.t - 1;
    saw_stale = saw_stale || r.base_t + 1 < r.t;
  }
  EXPECT_TRUE(saw_stale);
}

TEST_F(Engine, SimulatedTimeIsMonotone) {
  const auto part = partition(data, {SplitMode::shuffled_iid, 3, 4});
  const auto mode = ExecutionMode::overlapped({DelayModel::Kind::uniform, 0.0, 0.1, 3.0, 1});
  const auto trace = run_schedule(part, obj, full(0.01), Schedule::uniform(3, 6), mode, 30);
  for (std::size_t i = 1; i < trace.records.size(); ++i) {
    EXPECT_GE(trace.records[i].simulated_time, trace.records[i - 1].simulated_time);
  }
  const auto ser = run_schedule(part, obj, full(0.01), Schedule::round_robin(3),
                                ExecutionMode{ExecutionMode::Kind::serialized, {DelayModel::Kind::constant, 2.0}}, 4);
  EXPECT_DOUBLE_EQ(ser.records.back().simulated_time, 8.0);
}

TEST_F(Engine, ContactCallbackAndByteCounts) {
  const auto part = partition(data, {SplitMode::contiguous, 2, 0});
  std::size_t calls = 0;
  RunOptions opts;
  opts.on_contact = [&](const ContactRecord&) { ++calls; };
  const auto trace = run_schedule(part, obj, full(0.01), Schedule::round_robin(2), ExecutionMode::serialized(), 5, opts);
  EXPECT_EQ(calls, 5u);
  // pull (13 + 17+32) then push (13+32 + 17+32) per serialized contact.
  for (const auto& r : trace.records) EXPECT_EQ(r.bytes_sent, 13u + 49u + 45u + 49u);
  const auto counts = trace.contact_counts();
  EXPECT_EQ(counts[0], 3u);
  EXPECT_EQ(counts[1], 2u);
}

TEST_F(Engine, AsyncRidgeConvergesNearOptimum) {
  const auto big = generate_regression(400, 5, vec({1, -2, 0.5, 0.25, -1, 0.7}), 0.01, 17);
  const Objective ridge{LossKind::squared, Regularizer::l2, 0.1};
  const Theta star = normal_equations(ridge, big);
  const auto part = partition(big, {SplitMode::shuffled_iid, 4, 1});
  const UpdatePolicy pol = full(default_step_size(ridge, big));
  const auto trace = run_schedule(part, ridge, pol, Schedule::uniform(4, 99),
                                  ExecutionMode::overlapped({DelayModel::Kind::uniform, 0.0, 0.5, 1.5, 5}), 10000);
  EXPECT_LE((trace.final_theta().values() - star.values()).norm(), 1e-3);
}

TEST(Aggregation, SingleShardMatchesClosedForm) {
  const auto d = generate_regression(50, 3, vec({1, 2, 3, 4}), 0.1, 2);
  const auto part = partition(d, {SplitMode::contiguous, 1, 0});
  EXPECT_LE((aggregate_second_order(part).values() - normal_equations({}, d).values()).lpNorm<Eigen::Infinity>(),
            1e-12);
}

TEST(Aggregation, MatchesPooledSolveAndCountsReals) {
  const auto d = generate_regression(200, 5, vec({1, -1, 0.5, 2, -0.3, 0.8}), 0.1, 3);
  const auto part = partition(d, {SplitMode::shuffled_iid, 4, 11});
  SummaryChannel<SecondOrderStats> ch;
  const Theta agg = aggregate_second_order(part, &ch);
  EXPECT_LE((agg.values() - pooled_ls(d)).lpNorm<Eigen::Infinity>(), 1e-8);
  EXPECT_EQ(ch.messages().size(), 4u);
  for (std::uint32_t k = 0; k < 4; ++k) EXPECT_EQ(ch.reals_sent_by(k), 36u + 6u);
  EXPECT_EQ(ch.reals_sent(), 4u * 42u);
}

TEST(Aggregation, PropertyInvariantUnderRegrouping) {
  const auto d = generate_regression(90, 2, vec({0.5, -1.5, 2}), 0.3, 4);
  const Vector ref = pooled_ls(d);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto mode = trial % 2 ? SplitMode::shuffled_iid : SplitMode::contiguous;
    const auto part = partition(d, {mode, 1 + rng() % 10, rng()});
    EXPECT_LE((aggregate_second_order(part).values() - ref).lpNorm<Eigen::Infinity>(), 1e-10);
  }
}

TEST(Aggregation, Errors) {
  Matrix x(5, 2);
  x << 1, 2, 2, 4, 3, 6, 4, 8, 5, 10;
  const Dataset collinear(x, vec({1, 2, 3, 4, 5}), LabelKind::real);
  EXPECT_THROW(aggregate_second_order(partition(collinear, {SplitMode::contiguous, 2, 0})), RankDeficiency);
  const auto small = generate_regression(3, 2, vec({1, 1, 1}), 0.1, 0);
  EXPECT_THROW(aggregate_second_order(partition(small, {SplitMode::contiguous, 1, 0})), InvalidArgument);
}

static_assert(is_summary_message_v<SecondOrderStats>);
static_assert(!is_summary_message_v<Dataset>);
