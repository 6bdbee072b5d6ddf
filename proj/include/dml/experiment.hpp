#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dml/channel.hpp"
#include "dml/clustering.hpp"
#include "dml/config.hpp"
#include "dml/coordinator.hpp"
#include "dml/csv.hpp"
#include "dml/data.hpp"
#include "dml/error.hpp"
#include "dml/gp.hpp"
#include "dml/learners.hpp"
#include "dml/server.hpp"
#include "dml/transport.hpp"

namespace dml {

namespace fs = std::filesystem;

inline Dataset make_dataset(const DataSpec& d) {
  switch (d.source) {
    case DataSpec::Source::regression: {
      const Vector theta = d.theta.size() > 0 ? d.theta : Vector::Ones(static_cast<Eigen::Index>(d.dim + 1));
      return generate_regression(d.n_points, d.dim, theta, d.noise, d.seed);
    }
    case DataSpec::Source::clusters:
      return generate_clusters(d.centers, d.spread, d.per_cluster, d.shape, d.seed);
    case DataSpec::Source::csv:
      return load_csv(d.path);
  }
  throw InvalidArgument("unknown data source");
}

namespace experiment_detail {

inline Json to_json(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Json to_json(const Matrix& m) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(to_json(Vector(m.row(i).transpose())));
  return a;
}

inline Json to_json(const Window& w) {
  return Json{{"center", to_json(w.center)},
              {"weights", to_json(w.weights)},
              {"radius", w.radius},
              {"cardinality", w.cardinality}};
}

inline Json nullable(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot open '" + p.string() + "' for writing");
  return out;
}

inline void write_json(const fs::path& p, const Json& j) {
  auto out = open_out(p);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write to '" + p.string() + "' failed");
}

/// Appends one JSON object per line, flushing each so partial runs stay readable.
class MetricsWriter {
 public:
  explicit MetricsWriter(const fs::path& p) : path_(p), out_(open_out(p)) {}

  void write(const Json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("write to '" + path_.string() + "' failed");
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

inline Json metrics_record(std::uint64_t t, std::uint32_t node, double objective, double dist, double sim_time,
                           std::uint64_t bytes) {
  return Json{{"t", t},
              {"node_id", node},
              {"objective", objective},
              {"dist_to_oracle", nullable(dist)},
              {"simulated_time", sim_time},
              {"bytes_on_wire", bytes}};
}

inline Json contact_json(const std::vector<std::size_t>& counts) {
  Json a = Json::array();
  for (auto c : counts) a.push_back(c);
  return a;
}

struct Oracle {
  Theta theta;
  std::string kind;
};

// Closed form where it exists, otherwise long full-gradient descent.
inline Oracle pooled_oracle(const Objective& obj, const Dataset& pooled, const UpdatePolicy& policy) {
  if (obj.loss == LossKind::squared && obj.regularizer != Regularizer::l1) {
    return {normal_equations(obj, pooled), "normal_equations"};
  }
  UpdatePolicy p;
  p.step_size = policy.step_size;
  p.epochs = 100000;
  p.tolerance = 1e-12;
  return {centralized_oracle(obj, pooled, p), "proximal_gradient"};
}

inline Json run_paramserver(const ExperimentConfig& cfg, const Dataset& data, const fs::path& out) {
  const Partition part = partition(data, cfg.split);
  const Dataset pooled = part.pooled();
  UpdatePolicy policy = cfg.policy;
  if (cfg.auto_step) policy.step_size = default_step_size(cfg.objective, pooled);
  const Schedule schedule = cfg.schedule.build(part.k());

  const Oracle oracle = pooled_oracle(cfg.objective, pooled, policy);
  const double oracle_objective = loss(cfg.objective, oracle.theta, pooled);

  const std::size_t total = cfg.contacts;
  const std::size_t every = std::max<std::size_t>(1, total / 100);
  MetricsWriter metrics(out / "metrics.jsonl");
  std::uint64_t bytes = 0;
  std::size_t seen = 0;
  RunOptions opts;
  opts.on_contact = [&](const ContactRecord& rec) {
    ++seen;
    bytes += rec.bytes_sent;
    const double obj = loss(cfg.objective, rec.theta_pushed, pooled);
    if (!std::isfinite(obj)) {
      throw NumericalError("objective is not finite at contact " + std::to_string(rec.t) + " (step size too large?)");
    }
    const double dist = (rec.theta_pushed.values() - oracle.theta.values()).norm();
    Json line = metrics_record(rec.t, rec.node_id, obj, dist, rec.simulated_time, bytes);
    if (rec.t % every == 0 || seen == total) line["theta"] = to_json(rec.theta_pushed.values());
    metrics.write(line);
  };

  std::unique_ptr<ParameterServer> server;
  std::unique_ptr<TcpServer> host;
  std::unique_ptr<TcpEndpoint> endpoint;
  if (cfg.transport.kind == TransportSpec::Kind::tcp) {
    server = std::make_unique<ParameterServer>(Theta::zeros(part.dim()));
    host = std::make_unique<TcpServer>(*server, cfg.transport.port);
    endpoint = std::make_unique<TcpEndpoint>(cfg.transport.host, host->port());
    opts.endpoint = endpoint.get();
  }
  const Trace trace = run_schedule(part, cfg.objective, policy, schedule, cfg.execution, total, opts);
  if (endpoint) {
    endpoint->shutdown_server();
    endpoint.reset();
    host->stop();
  }
  std::uint64_t pull_bytes = 0;
  for (const auto& p : trace.pulls) pull_bytes += p.bytes_sent;

  const Theta& final_theta = trace.final_theta();
  const double final_objective = loss(cfg.objective, final_theta, pooled);
  Json summary{{"task", task_name(cfg.task)},
               {"final_objective", final_objective},
               {"oracle_objective", oracle_objective},
               {"oracle_kind", oracle.kind},
               {"oracle_gap", (final_theta.values() - oracle.theta.values()).norm()},
               {"objective_gap", final_objective - oracle_objective},
               {"total_bytes", bytes + pull_bytes},
               {"contacts", trace.records.size()},
               {"contact_counts", contact_json(trace.contact_counts())},
               {"step_size", policy.step_size}};

  // Same number of full-gradient steps taken on the pooled data, for reference.
  if (policy.mode == UpdateMode::deterministic_full_gradient) {
    UpdatePolicy central = policy;
    central.epochs = policy.epochs * total;
    central.tolerance = 0.0;
    const Theta c = centralized_oracle(cfg.objective, pooled, central);
    summary["centralized"] = Json{{"objective", loss(cfg.objective, c, pooled)},
                                  {"oracle_gap", (c.values() - oracle.theta.values()).norm()}};
  }
  write_json(out / "model.json", Json{{"task", task_name(cfg.task)}, {"theta", to_json(final_theta.values())}});
  return summary;
}

inline Json run_aggregate(const ExperimentConfig& cfg, const Dataset& data, const fs::path& out) {
  if (cfg.objective.loss != LossKind::squared || cfg.objective.regularizer != Regularizer::none) {
    throw InvalidArgument("aggregate-ls solves unregularized least squares only");
  }
  const Partition part = partition(data, cfg.split);
  const Dataset pooled = part.pooled();
  SummaryChannel<SecondOrderStats> channel;
  const Theta theta = aggregate_second_order(part, &channel);
  const Theta oracle = normal_equations(cfg.objective, pooled);
  const double objective = loss(cfg.objective, theta, pooled);
  const double gap = (theta.values() - oracle.values()).norm();
  const std::uint64_t bytes = 8 * channel.reals_sent();

  MetricsWriter metrics(out / "metrics.jsonl");
  Json line = metrics_record(1, 0, objective, gap, 0.0, bytes);
  line["theta"] = to_json(theta.values());
  metrics.write(line);

  std::vector<std::size_t> counts(part.k(), 0);
  for (const auto& env : channel.messages()) ++counts[env.from];
  write_json(out / "model.json", Json{{"task", task_name(cfg.task)}, {"theta", to_json(theta.values())}});
  return Json{{"task", task_name(cfg.task)},
              {"final_objective", objective},
              {"oracle_objective", loss(cfg.objective, oracle, pooled)},
              {"oracle_kind", "normal_equations"},
              {"oracle_gap", gap},
              {"total_bytes", bytes},
              {"reals_sent", channel.reals_sent()},
              {"contact_counts", contact_json(counts)}};
}

inline Matrix test_inputs(const Dataset& data, std::size_t count, std::uint64_t seed) {
  const Matrix& x = data.points();
  const Vector lo = x.colwise().minCoeff().transpose();
  const Vector hi = x.colwise().maxCoeff().transpose();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Matrix out(static_cast<Eigen::Index>(count), x.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = lo(j) + unif(rng) * (hi(j) - lo(j));
  }
  return out;
}

// Above this the exact full GP is skipped.
inline constexpr std::size_t kFullGpLimit = 3000;

inline Json run_gp(const ExperimentConfig& cfg, const Dataset& data, const fs::path& out) {
  const Partition part = partition(data, cfg.split);
  const Dataset pooled = part.pooled();
  const gp::ExpertFit fitted = gp::fit_experts(part, cfg.gp.grid);
  gp::CombinationRule rule = cfg.gp.rule;
  if (!(rule.prior_var > 0.0)) rule.prior_var = fitted.kernel.signal_variance;

  const Matrix xs = test_inputs(pooled, cfg.gp.test_points, cfg.gp.test_seed);
  std::optional<gp::Model> full;
  if (pooled.size() <= kFullGpLimit) full = gp::fit(pooled, fitted.kernel);

  auto csv = open_out(out / "predictions.csv");
  for (Eigen::Index j = 0; j < xs.cols(); ++j) csv << 'f' << j << ',';
  csv << "mu,var" << (full ? ",full_mu,full_var" : "") << '\n';
  double sq = 0.0;
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    const Vector x = xs.row(i).transpose();
    const gp::Prediction p = gp::committee_predict(fitted.models, x, rule);
    for (Eigen::Index j = 0; j < xs.cols(); ++j) csv << detail::format_double(xs(i, j)) << ',';
    csv << detail::format_double(p.mu) << ',' << detail::format_double(p.var);
    if (full) {
      const gp::Prediction f = gp::predict(*full, x);
      sq += (p.mu - f.mu) * (p.mu - f.mu);
      csv << ',' << detail::format_double(f.mu) << ',' << detail::format_double(f.var);
    }
    csv << '\n';
  }
  if (!csv) throw IoError("write to predictions.csv failed");
  const double rmse = full ? std::sqrt(sq / static_cast<double>(xs.rows())) : std::nan("");

  double loglik = 0.0;
  for (const auto& m : fitted.models) loglik += gp::log_marginal_likelihood(m);
  MetricsWriter metrics(out / "metrics.jsonl");
  metrics.write(metrics_record(1, 0, -loglik, rmse, 0.0, 0));

  const Json kernel{{"lengthscale", fitted.kernel.lengthscale},
                    {"signal_variance", fitted.kernel.signal_variance},
                    {"noise_variance", fitted.kernel.noise_variance},
                    {"prior_mean", fitted.kernel.prior_mean}};
  Json scores = Json::array();
  for (double s : fitted.scores) scores.push_back(nullable(s));
  std::vector<std::size_t> sizes;
  for (const auto& s : part.shards) sizes.push_back(s.size());
  write_json(out / "model.json", Json{{"task", task_name(cfg.task)},
                                      {"kernel", kernel},
                                      {"experts", fitted.models.size()},
                                      {"prior_var", rule.prior_var}});
  return Json{{"task", task_name(cfg.task)},
              {"final_objective", -loglik},
              {"kernel", kernel},
              {"grid_scores", scores},
              {"oracle_gap", nullable(rmse)},
              {"oracle_kind", full ? "full_gp_mean_rmse" : "none"},
              {"total_bytes", 0},
              {"contact_counts", contact_json(sizes)}};
}

inline void write_assignments(const fs::path& p, const std::vector<std::int64_t>& assignment) {
  auto csv = open_out(p);
  csv << "index,cluster\n";
  for (std::size_t i = 0; i < assignment.size(); ++i) csv << i << ',' << assignment[i] << '\n';
  if (!csv) throw IoError("write to '" + p.string() + "' failed");
}

inline Json history_metrics(const fs::path& p, const std::vector<double>& history) {
  MetricsWriter metrics(p);
  for (std::size_t i = 0; i < history.size(); ++i) {
    metrics.write(metrics_record(i + 1, 0, history[i], std::nan(""), 0.0, 0));
  }
  return Json(history.size());
}

inline Json run_kmeans(const ExperimentConfig& cfg, const Dataset& data, const fs::path& out) {
  KMeansOptions opts;
  opts.norm = cfg.kmeans.norm;
  opts.seed = detail::mix_seed(cfg.seed, 8);
  opts.max_iters = cfg.kmeans.max_iters;
  opts.refine = cfg.kmeans.refine;
  const ClusterModel m = kmeans_best_of(data, cfg.kmeans.clusters, cfg.kmeans.restarts, opts);
  history_metrics(out / "metrics.jsonl", m.objective_history);
  write_assignments(out / "assignments.csv", m.assignment);
  write_json(out / "model.json", Json{{"task", task_name(cfg.task)}, {"centroids", to_json(m.centroids)}});
  Json summary{{"task", task_name(cfg.task)},
               {"final_objective", m.objective},
               {"iterations", m.iterations},
               {"oracle_gap", nullptr},
               {"total_bytes", 0}};
  if (data.has_labels()) summary["label_agreement"] = label_agreement(m.assignment, data.labels());
  return summary;
}

inline Json windows_json(const ClusterModel& m) {
  Json a = Json::array();
  for (const auto& w : m.windows) a.push_back(to_json(w));
  return a;
}

inline Json run_kwindows(const ExperimentConfig& cfg, const Dataset& data, const fs::path& out) {
  KWindowsConfig kc = cfg.kwindows.config;
  if (cfg.kwindows.auto_radius) kc.radius = default_radius(data);
  MetricsWriter metrics(out / "metrics.jsonl");
  Json summary{{"task", task_name(cfg.task)}, {"radius", kc.radius}, {"oracle_gap", nullptr}};
  if (!cfg.kwindows.distributed) {
    const ClusterModel m = kwindows(data, kc);
    metrics.write(metrics_record(1, 0, m.objective, std::nan(""), 0.0, 0));
    write_assignments(out / "assignments.csv", m.assignment);
    write_json(out / "model.json", Json{{"task", task_name(cfg.task)}, {"windows", windows_json(m)}});
    summary["final_objective"] = m.objective;
    summary["windows"] = m.windows.size();
    summary["total_bytes"] = 0;
    if (data.has_labels()) summary["label_agreement"] = label_agreement(m.assignment, data.labels());
    return summary;
  }

  const Partition part = partition(data, cfg.split);
  const Dataset pooled = part.pooled();
  SummaryChannel<WindowSummary> channel;
  const DistributedKWindows r = distributed_kwindows(part, kc, &channel);
  const std::uint64_t bytes = 8 * channel.reals_sent();
  metrics.write(metrics_record(1, 0, r.merged.objective, std::nan(""), 0.0, bytes));
  write_assignments(out / "assignments.csv", r.merged.assignment);
  write_json(out / "model.json", Json{{"task", task_name(cfg.task)}, {"windows", windows_json(r.merged)}});
  std::vector<std::size_t> counts(part.k(), 0);
  for (const auto& env : channel.messages()) ++counts[env.from];
  summary["final_objective"] = r.merged.objective;
  summary["windows"] = r.merged.windows.size();
  summary["centralized_windows"] = r.centralized.windows.size();
  summary["total_bytes"] = bytes;
  summary["reals_sent"] = channel.reals_sent();
  summary["contact_counts"] = contact_json(counts);
  if (pooled.has_labels()) {
    summary["label_agreement"] = label_agreement(r.merged.assignment, pooled.labels());
    summary["centralized_label_agreement"] = label_agreement(r.centralized.assignment, pooled.labels());
  }
  return summary;
}

}  // namespace experiment_detail

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

/// Runs the configured task, writing metrics.jsonl, model.json, summary.json
/// and any task-specific CSV under `out`. Returns the summary.
inline Json run_experiment(const ExperimentConfig& cfg, const fs::path& out) {
  namespace ed = experiment_detail;
  ensure_dir(out);
  const Dataset data = make_dataset(cfg.data);
  Json summary;
  switch (cfg.task) {
    case Task::paramserver: summary = ed::run_paramserver(cfg, data, out); break;
    case Task::aggregate_ls: summary = ed::run_aggregate(cfg, data, out); break;
    case Task::gp_committee: summary = ed::run_gp(cfg, data, out); break;
    case Task::kmeans: summary = ed::run_kmeans(cfg, data, out); break;
    case Task::kwindows: summary = ed::run_kwindows(cfg, data, out); break;
  }
  ed::write_json(out / "summary.json", summary);
  return summary;
}

/// Writes the configured dataset to `out/data.csv`.
inline fs::path write_dataset(const ExperimentConfig& cfg, const fs::path& out) {
  ensure_dir(out);
  const fs::path p = out / "data.csv";
  save_csv(make_dataset(cfg.data), p.string());
  return p;
}

/// Writes one `shard_<k>.csv` per node.
inline std::vector<fs::path> write_shards(const ExperimentConfig& cfg, const fs::path& out) {
  ensure_dir(out);
  const Partition part = partition(make_dataset(cfg.data), cfg.split);
  std::vector<fs::path> paths;
  for (std::size_t k = 0; k < part.k(); ++k) {
    paths.push_back(out / ("shard_" + std::to_string(k) + ".csv"));
    save_csv(part.shards[k], paths.back().string());
  }
  return paths;
}

struct ReportRow {
  std::uint64_t t = 0;
  double objective = 0.0;
  std::optional<double> dist_to_oracle;
};

/// Parses a metrics file. Malformed lines raise ParseError with their number.
inline std::vector<ReportRow> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<ReportRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error&) {
      throw ParseError(line_no, "not a JSON object");
    }
    if (!j.is_object()) throw ParseError(line_no, "not a JSON object");
    const auto t = j.find("t");
    const auto obj = j.find("objective");
    const auto dist = j.find("dist_to_oracle");
    if (t == j.end() || !t->is_number_unsigned()) throw ParseError(line_no, "missing or invalid 't'");
    if (obj == j.end() || !obj->is_number()) throw ParseError(line_no, "missing or invalid 'objective'");
    if (dist != j.end() && !dist->is_null() && !dist->is_number()) {
      throw ParseError(line_no, "invalid 'dist_to_oracle'");
    }
    ReportRow r{t->get<std::uint64_t>(), obj->get<double>(), std::nullopt};
    if (dist != j.end() && dist->is_number()) r.dist_to_oracle = dist->get<double>();
    if (!rows.empty() && r.t <= rows.back().t) throw ParseError(line_no, "'t' is not strictly increasing");
    rows.push_back(r);
  }
  if (rows.empty()) throw IoError("'" + path.string() + "': no records");
  return rows;
}

/// Prints a convergence table to `table` (at most ~20 evenly spaced rows) and
/// writes every record to `csv_path`. Returns the number of records.
inline std::size_t report(const fs::path& metrics_path, const fs::path& csv_path, std::ostream& table) {
  const auto rows = read_metrics(metrics_path);
  if (csv_path.has_parent_path()) ensure_dir(csv_path.parent_path());
  auto csv = experiment_detail::open_out(csv_path);
  csv << "t,objective,dist_to_oracle\n";
  for (const auto& r : rows) {
    csv << r.t << ',' << detail::format_double(r.objective) << ','
        << (r.dist_to_oracle ? detail::format_double(*r.dist_to_oracle) : std::string()) << '\n';
  }
  if (!csv) throw IoError("write to '" + csv_path.string() + "' failed");

  char buf[128];
  std::snprintf(buf, sizeof buf, "%10s  %16s  %16s\n", "t", "objective", "dist_to_oracle");
  table << buf;
  const std::size_t stride = std::max<std::size_t>(1, rows.size() / 20);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i % stride != 0 && i + 1 != rows.size()) continue;
    const auto& r = rows[i];
    if (r.dist_to_oracle) {
      std::snprintf(buf, sizeof buf, "%10llu  %16.9g  %16.9g\n", static_cast<unsigned long long>(r.t), r.objective,
                    *r.dist_to_oracle);
    } else {
      std::snprintf(buf, sizeof buf, "%10llu  %16.9g  %16s\n", static_cast<unsigned long long>(r.t), r.objective,
                    "-");
    }
    table << buf;
  }
  return rows.size();
}

}  // namespace dml
