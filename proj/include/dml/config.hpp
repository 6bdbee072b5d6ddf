#pragma once

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dml/clustering.hpp"
#include "dml/coordinator.hpp"
#include "dml/data.hpp"
#include "dml/error.hpp"
#include "dml/gp.hpp"
#include "dml/learners.hpp"

namespace dml {

using Json = nlohmann::json;

enum class Task { paramserver, aggregate_ls, gp_committee, kwindows, kmeans };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::paramserver: return "paramserver";
    case Task::aggregate_ls: return "aggregate-ls";
    case Task::gp_committee: return "gp-committee";
    case Task::kwindows: return "kwindows";
    case Task::kmeans: return "kmeans";
  }
  return "?";
}

struct DataSpec {
  enum class Source { regression, clusters, csv };
  Source source = Source::regression;
  std::size_t n_points = 0;
  std::size_t dim = 0;
  /// Generating θ (length dim+1); empty means all ones.
  Vector theta;
  double noise = 0.0;
  std::vector<Vector> centers;
  double spread = 1.0;
  std::size_t per_cluster = 0;
  ClusterShape shape = ClusterShape::gaussian;
  std::string path;
  std::uint64_t seed = 0;
};

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::round_robin;
  /// Empty with async_random means uniform.
  std::vector<double> probs;
  std::uint64_t seed = 0;

  Schedule build(std::size_t k) const {
    if (kind == ScheduleKind::round_robin) return Schedule::round_robin(k);
    if (probs.empty()) return Schedule::uniform(k, seed);
    return Schedule::async_random(probs, seed);
  }
};

struct TransportSpec {
  enum class Kind { inprocess, tcp };
  Kind kind = Kind::inprocess;
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

struct GpSpec {
  std::vector<gp::Kernel> grid;
  /// prior_var 0 means the selected kernel's signal variance.
  gp::CombinationRule rule{gp::RuleKind::gbcm, {}, 0.0};
  std::size_t test_points = 50;
  std::uint64_t test_seed = 0;
};

struct KMeansSpec {
  std::size_t clusters = 2;
  Norm norm = Norm::l2;
  std::size_t restarts = 10;
  std::size_t max_iters = 300;
  bool refine = true;
};

struct KWindowsSpec {
  KWindowsConfig config;
  /// Derive r from the data when true.
  bool auto_radius = true;
  bool distributed = false;
};

struct ExperimentConfig {
  Task task = Task::paramserver;
  std::uint64_t seed = 0;
  std::optional<std::string> output_dir;
  DataSpec data;
  SplitSpec split{SplitMode::shuffled_iid, 1, 0};
  Objective objective;
  UpdatePolicy policy;
  /// step_size from the pooled data's Lipschitz estimate.
  bool auto_step = true;
  ScheduleSpec schedule;
  ExecutionMode execution;
  std::size_t contacts = 100;
  TransportSpec transport;
  GpSpec gp;
  KMeansSpec kmeans;
  KWindowsSpec kwindows;
};

namespace config_detail {

inline std::string escape(const std::string& key) {
  std::string out;
  for (char c : key) {
    if (c == '~') out += "~0";
    else if (c == '/') out += "~1";
    else out += c;
  }
  return out;
}

inline std::string child(const std::string& path, const std::string& key) { return path + "/" + escape(key); }

inline void require_object(const Json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path.empty() ? "/" : path, "expected an object");
}

inline void check_keys(const Json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  require_object(j, path);
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(child(path, key), "unknown key");
  }
}

inline const Json* find(const Json& j, const char* key) {
  const auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

inline const Json& require(const Json& j, const std::string& path, const char* key) {
  const Json* v = find(j, key);
  if (!v) throw ConfigError(child(path, key), "required key is missing");
  return *v;
}

inline double number(const Json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError(path, "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw ConfigError(path, "expected a finite number");
  return x;
}

inline std::uint64_t count(const Json& v, const std::string& path) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw ConfigError(path, "expected a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

inline std::string string(const Json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError(path, "expected a string");
  return v.get<std::string>();
}

inline bool boolean(const Json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError(path, "expected true or false");
  return v.get<bool>();
}

template <typename E>
E choice(const Json& v, const std::string& path, std::initializer_list<std::pair<const char*, E>> options) {
  const std::string s = string(v, path);
  std::string names;
  for (const auto& [name, value] : options) {
    if (s == name) return value;
    names += names.empty() ? name : std::string(", ") + name;
  }
  throw ConfigError(path, "unknown value '" + s + "' (expected one of: " + names + ")");
}

inline Vector vector(const Json& v, const std::string& path) {
  if (!v.is_array() || v.empty()) throw ConfigError(path, "expected a nonempty array of numbers");
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = number(v[i], path + "/" + std::to_string(i));
  return out;
}

inline double positive(const Json& v, const std::string& path) {
  const double x = number(v, path);
  if (!(x > 0.0)) throw ConfigError(path, "must be > 0");
  return x;
}

inline double non_negative(const Json& v, const std::string& path) {
  const double x = number(v, path);
  if (!(x >= 0.0)) throw ConfigError(path, "must be >= 0");
  return x;
}

inline std::size_t at_least_one(const Json& v, const std::string& path) {
  const auto n = count(v, path);
  if (n < 1) throw ConfigError(path, "must be >= 1");
  return static_cast<std::size_t>(n);
}

// Runs fn(value, path) when the key is present.
template <typename F>
void optional(const Json& j, const std::string& path, const char* key, F&& fn) {
  if (const Json* v = find(j, key)) fn(*v, child(path, key));
}

inline void parse_data(const Json& j, const std::string& path, DataSpec& d) {
  require_object(j, path);
  d.source = choice<DataSpec::Source>(require(j, path, "source"), child(path, "source"),
                                      {{"regression", DataSpec::Source::regression},
                                       {"clusters", DataSpec::Source::clusters},
                                       {"csv", DataSpec::Source::csv}});
  switch (d.source) {
    case DataSpec::Source::regression:
      check_keys(j, path, {"source", "n_points", "dim", "theta", "noise", "seed"});
      d.n_points = at_least_one(require(j, path, "n_points"), child(path, "n_points"));
      d.dim = at_least_one(require(j, path, "dim"), child(path, "dim"));
      optional(j, path, "theta", [&](const Json& v, const std::string& p) {
        d.theta = vector(v, p);
        if (static_cast<std::size_t>(d.theta.size()) != d.dim + 1) throw ConfigError(p, "needs dim+1 entries");
      });
      optional(j, path, "noise", [&](const Json& v, const std::string& p) { d.noise = non_negative(v, p); });
      break;
    case DataSpec::Source::clusters: {
      check_keys(j, path, {"source", "centers", "spread", "per_cluster", "shape", "seed"});
      const std::string cp = child(path, "centers");
      const Json& cs = require(j, path, "centers");
      if (!cs.is_array() || cs.empty()) throw ConfigError(cp, "expected a nonempty array of points");
      for (std::size_t i = 0; i < cs.size(); ++i) {
        d.centers.push_back(vector(cs[i], cp + "/" + std::to_string(i)));
        if (d.centers.back().size() != d.centers.front().size()) {
          throw ConfigError(cp + "/" + std::to_string(i), "all centers need the same dimension");
        }
      }
      d.spread = positive(require(j, path, "spread"), child(path, "spread"));
      d.per_cluster = at_least_one(require(j, path, "per_cluster"), child(path, "per_cluster"));
      optional(j, path, "shape", [&](const Json& v, const std::string& p) {
        d.shape = choice<ClusterShape>(v, p, {{"gaussian", ClusterShape::gaussian}, {"uniform_box", ClusterShape::uniform_box}});
      });
      break;
    }
    case DataSpec::Source::csv:
      check_keys(j, path, {"source", "path", "seed"});
      d.path = string(require(j, path, "path"), child(path, "path"));
      break;
  }
  optional(j, path, "seed", [&](const Json& v, const std::string& p) { d.seed = count(v, p); });
}

inline void parse_split(const Json& j, const std::string& path, SplitSpec& s) {
  check_keys(j, path, {"mode", "k", "seed"});
  optional(j, path, "mode", [&](const Json& v, const std::string& p) {
    s.mode = choice<SplitMode>(v, p,
                               {{"shuffled_iid", SplitMode::shuffled_iid},
                                {"contiguous", SplitMode::contiguous},
                                {"by_label", SplitMode::by_label_heterogeneous}});
  });
  optional(j, path, "k", [&](const Json& v, const std::string& p) { s.k = at_least_one(v, p); });
  optional(j, path, "seed", [&](const Json& v, const std::string& p) { s.seed = count(v, p); });
}

inline void parse_objective(const Json& j, const std::string& path, Objective& o) {
  check_keys(j, path, {"loss", "regularizer", "lambda"});
  optional(j, path, "loss", [&](const Json& v, const std::string& p) {
    o.loss = choice<LossKind>(v, p, {{"squared", LossKind::squared}, {"logistic", LossKind::logistic}});
  });
  optional(j, path, "regularizer", [&](const Json& v, const std::string& p) {
    o.regularizer =
        choice<Regularizer>(v, p, {{"none", Regularizer::none}, {"l1", Regularizer::l1}, {"l2", Regularizer::l2}});
  });
  optional(j, path, "lambda", [&](const Json& v, const std::string& p) { o.lambda = non_negative(v, p); });
}

inline void parse_policy(const Json& j, const std::string& path, ExperimentConfig& c) {
  check_keys(j, path, {"step_size", "epochs", "batch_size", "mode", "seed", "tolerance"});
  optional(j, path, "step_size", [&](const Json& v, const std::string& p) {
    if (v.is_string()) {
      if (v.get<std::string>() != "auto") throw ConfigError(p, "expected a number > 0 or \"auto\"");
      c.auto_step = true;
      return;
    }
    c.policy.step_size = positive(v, p);
    c.auto_step = false;
  });
  optional(j, path, "epochs", [&](const Json& v, const std::string& p) { c.policy.epochs = at_least_one(v, p); });
  optional(j, path, "batch_size", [&](const Json& v, const std::string& p) {
    if (v.is_string() && v.get<std::string>() == "full") {
      c.policy.batch_size.reset();
      return;
    }
    c.policy.batch_size = at_least_one(v, p);
  });
  optional(j, path, "mode", [&](const Json& v, const std::string& p) {
    c.policy.mode = choice<UpdateMode>(v, p,
                                       {{"full_gradient", UpdateMode::deterministic_full_gradient},
                                        {"minibatch", UpdateMode::stochastic_minibatch}});
  });
  optional(j, path, "seed", [&](const Json& v, const std::string& p) { c.policy.seed = count(v, p); });
  optional(j, path, "tolerance", [&](const Json& v, const std::string& p) { c.policy.tolerance = non_negative(v, p); });
}

inline void parse_schedule(const Json& j, const std::string& path, ScheduleSpec& s) {
  check_keys(j, path, {"kind", "probs", "seed"});
  optional(j, path, "kind", [&](const Json& v, const std::string& p) {
    s.kind = choice<ScheduleKind>(v, p,
                                  {{"round_robin", ScheduleKind::round_robin},
                                   {"async_random", ScheduleKind::async_random}});
  });
  optional(j, path, "probs", [&](const Json& v, const std::string& p) {
    const Vector probs = vector(v, p);
    s.probs.assign(probs.data(), probs.data() + probs.size());
    for (std::size_t i = 0; i < s.probs.size(); ++i) {
      if (!(s.probs[i] > 0.0)) {
        throw ConfigError(p + "/" + std::to_string(i), "every node needs a probability > 0");
      }
    }
  });
  optional(j, path, "seed", [&](const Json& v, const std::string& p) { s.seed = count(v, p); });
}

inline void parse_execution(const Json& j, const std::string& path, ExecutionMode& e) {
  check_keys(j, path, {"mode", "delay"});
  optional(j, path, "mode", [&](const Json& v, const std::string& p) {
    e.kind = choice<ExecutionMode::Kind>(v, p,
                                         {{"serialized", ExecutionMode::Kind::serialized},
                                          {"overlapped", ExecutionMode::Kind::overlapped}});
  });
  optional(j, path, "delay", [&](const Json& d, const std::string& dp) {
    require_object(d, dp);
    e.delay.kind = choice<DelayModel::Kind>(require(d, dp, "kind"), child(dp, "kind"),
                                            {{"constant", DelayModel::Kind::constant},
                                             {"uniform", DelayModel::Kind::uniform}});
    if (e.delay.kind == DelayModel::Kind::constant) {
      check_keys(d, dp, {"kind", "value"});
      optional(d, dp, "value", [&](const Json& v, const std::string& p) { e.delay.value = non_negative(v, p); });
    } else {
      check_keys(d, dp, {"kind", "low", "high", "seed"});
      e.delay.low = non_negative(require(d, dp, "low"), child(dp, "low"));
      e.delay.high = non_negative(require(d, dp, "high"), child(dp, "high"));
      if (e.delay.high < e.delay.low) throw ConfigError(child(dp, "high"), "must be >= low");
      optional(d, dp, "seed", [&](const Json& v, const std::string& p) { e.delay.seed = count(v, p); });
    }
  });
}

inline void parse_transport(const Json& j, const std::string& path, TransportSpec& t) {
  check_keys(j, path, {"kind", "host", "port"});
  optional(j, path, "kind", [&](const Json& v, const std::string& p) {
    t.kind = choice<TransportSpec::Kind>(v, p, {{"inprocess", TransportSpec::Kind::inprocess},
                                                {"tcp", TransportSpec::Kind::tcp}});
  });
  optional(j, path, "host", [&](const Json& v, const std::string& p) { t.host = string(v, p); });
  optional(j, path, "port", [&](const Json& v, const std::string& p) {
    const auto port = count(v, p);
    if (port > 65535) throw ConfigError(p, "must be a TCP port number");
    t.port = static_cast<std::uint16_t>(port);
  });
}

inline void parse_gp(const Json& j, const std::string& path, GpSpec& g) {
  check_keys(j, path, {"lengthscales", "signal_variances", "noise_variance", "prior_mean", "rule", "test_points",
                       "test_seed"});
  const std::string lp = child(path, "lengthscales");
  const std::string sp = child(path, "signal_variances");
  const Vector ls = vector(require(j, path, "lengthscales"), lp);
  const Vector ss = vector(require(j, path, "signal_variances"), sp);
  double noise = 0.0;
  double mean = 0.0;
  optional(j, path, "noise_variance", [&](const Json& v, const std::string& p) { noise = non_negative(v, p); });
  optional(j, path, "prior_mean", [&](const Json& v, const std::string& p) { mean = number(v, p); });
  for (Eigen::Index a = 0; a < ls.size(); ++a) {
    if (!(ls(a) > 0.0)) throw ConfigError(lp + "/" + std::to_string(a), "must be > 0");
    for (Eigen::Index b = 0; b < ss.size(); ++b) {
      if (!(ss(b) > 0.0)) throw ConfigError(sp + "/" + std::to_string(b), "must be > 0");
      g.grid.push_back(gp::Kernel{ls(a), ss(b), noise, mean});
    }
  }
  optional(j, path, "rule", [&](const Json& r, const std::string& rp) {
    check_keys(r, rp, {"kind", "betas", "prior_var"});
    optional(r, rp, "kind", [&](const Json& v, const std::string& p) {
      g.rule.kind = choice<gp::RuleKind>(v, p,
                                         {{"poe", gp::RuleKind::poe},
                                          {"gpoe", gp::RuleKind::gpoe},
                                          {"bcm", gp::RuleKind::bcm},
                                          {"gbcm", gp::RuleKind::gbcm}});
    });
    optional(r, rp, "betas", [&](const Json& v, const std::string& p) {
      const Vector b = vector(v, p);
      g.rule.betas.assign(b.data(), b.data() + b.size());
      for (std::size_t i = 0; i < g.rule.betas.size(); ++i) {
        if (!(g.rule.betas[i] > 0.0)) throw ConfigError(p + "/" + std::to_string(i), "must be > 0");
      }
    });
    optional(r, rp, "prior_var", [&](const Json& v, const std::string& p) { g.rule.prior_var = positive(v, p); });
  });
  optional(j, path, "test_points", [&](const Json& v, const std::string& p) { g.test_points = at_least_one(v, p); });
  optional(j, path, "test_seed", [&](const Json& v, const std::string& p) { g.test_seed = count(v, p); });
}

inline void parse_kmeans(const Json& j, const std::string& path, KMeansSpec& k) {
  check_keys(j, path, {"clusters", "norm", "restarts", "max_iters", "refine"});
  optional(j, path, "clusters", [&](const Json& v, const std::string& p) { k.clusters = at_least_one(v, p); });
  optional(j, path, "norm", [&](const Json& v, const std::string& p) {
    k.norm = choice<Norm>(v, p, {{"l2", Norm::l2}, {"linf", Norm::linf}});
  });
  optional(j, path, "restarts", [&](const Json& v, const std::string& p) { k.restarts = at_least_one(v, p); });
  optional(j, path, "max_iters", [&](const Json& v, const std::string& p) { k.max_iters = at_least_one(v, p); });
  optional(j, path, "refine", [&](const Json& v, const std::string& p) { k.refine = boolean(v, p); });
}

inline void parse_kwindows(const Json& j, const std::string& path, KWindowsSpec& k) {
  check_keys(j, path, {"k_init", "radius", "enlarge_step", "enlarge_threshold", "min_new_points", "center_tol",
                       "merge_overlap", "max_iters", "distributed"});
  KWindowsConfig& c = k.config;
  optional(j, path, "k_init", [&](const Json& v, const std::string& p) { c.k_init = at_least_one(v, p); });
  optional(j, path, "radius", [&](const Json& v, const std::string& p) {
    if (v.is_string() && v.get<std::string>() == "auto") {
      k.auto_radius = true;
      return;
    }
    c.radius = positive(v, p);
    k.auto_radius = false;
  });
  optional(j, path, "enlarge_step", [&](const Json& v, const std::string& p) { c.enlarge_step = positive(v, p); });
  optional(j, path, "enlarge_threshold", [&](const Json& v, const std::string& p) {
    c.enlarge_threshold = positive(v, p);
    if (c.enlarge_threshold > 1.0) throw ConfigError(p, "must lie in (0, 1]");
  });
  optional(j, path, "min_new_points", [&](const Json& v, const std::string& p) { c.min_new_points = count(v, p); });
  optional(j, path, "center_tol", [&](const Json& v, const std::string& p) { c.center_tol = non_negative(v, p); });
  optional(j, path, "merge_overlap", [&](const Json& v, const std::string& p) {
    c.merge_overlap = positive(v, p);
    if (c.merge_overlap > 1.0) throw ConfigError(p, "must lie in (0, 1]");
  });
  optional(j, path, "max_iters", [&](const Json& v, const std::string& p) { c.max_iters = at_least_one(v, p); });
  optional(j, path, "distributed", [&](const Json& v, const std::string& p) { k.distributed = boolean(v, p); });
}

}  // namespace config_detail

/// Validates and converts a config document. Errors carry a JSON pointer to
/// the offending key. Sub-seeds that are not given derive from "seed".
inline ExperimentConfig parse_config(const Json& j) {
  namespace cd = config_detail;
  cd::check_keys(j, "", {"task", "seed", "output_dir", "data", "split", "objective", "policy", "schedule",
                         "execution", "contacts", "transport", "gp", "kmeans", "kwindows"});
  ExperimentConfig c;
  c.task = cd::choice<Task>(cd::require(j, "", "task"), "/task",
                            {{"paramserver", Task::paramserver},
                             {"aggregate-ls", Task::aggregate_ls},
                             {"gp-committee", Task::gp_committee},
                             {"kwindows", Task::kwindows},
                             {"kmeans", Task::kmeans}});
  cd::optional(j, "", "seed", [&](const Json& v, const std::string& p) { c.seed = cd::count(v, p); });
  cd::optional(j, "", "output_dir", [&](const Json& v, const std::string& p) { c.output_dir = cd::string(v, p); });

  // Defaults for sub-seeds, overridden below when a section names its own.
  c.data.seed = detail::mix_seed(c.seed, 1);
  c.split.seed = detail::mix_seed(c.seed, 2);
  c.policy.seed = detail::mix_seed(c.seed, 3);
  c.schedule.seed = detail::mix_seed(c.seed, 4);
  c.execution.delay.seed = detail::mix_seed(c.seed, 5);
  c.gp.test_seed = detail::mix_seed(c.seed, 6);
  c.kwindows.config.seed = detail::mix_seed(c.seed, 7);
  c.kwindows.config.k_init = 6;

  cd::parse_data(cd::require(j, "", "data"), "/data", c.data);
  cd::optional(j, "", "split", [&](const Json& v, const std::string& p) { cd::parse_split(v, p, c.split); });
  cd::optional(j, "", "objective", [&](const Json& v, const std::string& p) { cd::parse_objective(v, p, c.objective); });
  cd::optional(j, "", "policy", [&](const Json& v, const std::string& p) { cd::parse_policy(v, p, c); });
  cd::optional(j, "", "schedule", [&](const Json& v, const std::string& p) { cd::parse_schedule(v, p, c.schedule); });
  cd::optional(j, "", "execution", [&](const Json& v, const std::string& p) { cd::parse_execution(v, p, c.execution); });
  cd::optional(j, "", "contacts", [&](const Json& v, const std::string& p) { c.contacts = cd::at_least_one(v, p); });
  cd::optional(j, "", "transport", [&](const Json& v, const std::string& p) { cd::parse_transport(v, p, c.transport); });
  cd::optional(j, "", "kmeans", [&](const Json& v, const std::string& p) { cd::parse_kmeans(v, p, c.kmeans); });
  cd::optional(j, "", "kwindows", [&](const Json& v, const std::string& p) { cd::parse_kwindows(v, p, c.kwindows); });
  if (c.task == Task::gp_committee) {
    cd::parse_gp(cd::require(j, "", "gp"), "/gp", c.gp);
  } else {
    cd::optional(j, "", "gp", [&](const Json& v, const std::string& p) { cd::parse_gp(v, p, c.gp); });
  }

  if (!c.schedule.probs.empty() && c.schedule.probs.size() != c.split.k) {
    throw ConfigError("/schedule/probs", "needs one probability per shard (" + std::to_string(c.split.k) + ")");
  }
  if (!c.schedule.probs.empty()) {
    try {
      Schedule::async_random(c.schedule.probs, 0);
    } catch (const InvalidArgument& e) {
      throw ConfigError("/schedule/probs", e.what());
    }
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("/", std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

}  // namespace dml
