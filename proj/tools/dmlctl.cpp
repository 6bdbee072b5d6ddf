// dmlctl: configured experiment runs over the dml library.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "dml/config.hpp"
#include "dml/error.hpp"
#include "dml/experiment.hpp"

namespace {

enum Exit { ok = 0, config_error = 2, numerical_error = 3, io_error = 4 };

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

// --seed replaces the top-level seed before sub-seeds are derived.
dml::ExperimentConfig load(const Globals& g) {
  if (g.config.empty()) throw dml::ConfigError("--config", "required for this subcommand");
  std::ifstream in(g.config);
  if (!in) throw dml::IoError("cannot open config file '" + g.config + "'");
  dml::Json j;
  try {
    j = dml::Json::parse(in);
  } catch (const dml::Json::parse_error& e) {
    throw dml::ConfigError("/", std::string("config is not valid JSON: ") + e.what());
  }
  if (g.seed && j.is_object()) j["seed"] = *g.seed;
  return dml::parse_config(j);
}

std::filesystem::path out_dir(const Globals& g, const dml::ExperimentConfig* cfg) {
  if (g.out) return *g.out;
  if (cfg && cfg->output_dir) return *cfg->output_dir;
  throw dml::ConfigError("/output_dir", "no output directory (set it in the config or pass --out)");
}

void require_task(const dml::ExperimentConfig& cfg, const std::string& sub,
                  std::initializer_list<dml::Task> allowed) {
  for (auto t : allowed) {
    if (cfg.task == t) return;
  }
  throw dml::ConfigError("/task", std::string("task '") + dml::task_name(cfg.task) + "' cannot run under '" + sub + "'");
}

void print_summary(const dml::Json& summary, const std::filesystem::path& out) {
  std::cout << summary.dump(2) << '\n' << "artifacts written to " << out.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed learning experiments: parameter-server training, GP committees, clustering"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  app.add_option("--seed", g.seed, "Override the config's top-level seed");
  app.add_option("--out", g.out, "Output directory (overrides output_dir)");

  auto* gen = app.add_subcommand("gen", "Write the configured dataset to <out>/data.csv");
  auto* split = app.add_subcommand("split", "Write the configured shards to <out>/shard_<k>.csv");
  auto* train = app.add_subcommand("train", "Run a paramserver or aggregate-ls task");
  auto* gp = app.add_subcommand("gp", "Fit a GP committee and predict on test inputs");
  auto* cluster = app.add_subcommand("cluster", "Run a kmeans or kwindows task");
  auto* rep = app.add_subcommand("report", "Print a convergence table and write a CSV");
  std::string metrics_path;
  std::string csv_path;
  rep->add_option("metrics", metrics_path, "metrics.jsonl to summarize")->required();
  rep->add_option("--csv", csv_path, "CSV destination (default <out>/report.csv or next to the metrics)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    if (rep->parsed()) {
      std::filesystem::path csv = csv_path;
      if (csv.empty()) {
        csv = g.out ? std::filesystem::path(*g.out) / "report.csv"
                    : std::filesystem::path(metrics_path).parent_path() / "report.csv";
      }
      const std::size_t n = dml::report(metrics_path, csv, std::cout);
      std::cout << n << " records, CSV written to " << csv.string() << '\n';
      return ok;
    }

    const dml::ExperimentConfig cfg = load(g);
    const auto out = out_dir(g, &cfg);
    if (gen->parsed()) {
      std::cout << "wrote " << dml::write_dataset(cfg, out).string() << '\n';
    } else if (split->parsed()) {
      for (const auto& p : dml::write_shards(cfg, out)) std::cout << "wrote " << p.string() << '\n';
    } else {
      if (train->parsed()) require_task(cfg, "train", {dml::Task::paramserver, dml::Task::aggregate_ls});
      if (gp->parsed()) require_task(cfg, "gp", {dml::Task::gp_committee});
      if (cluster->parsed()) require_task(cfg, "cluster", {dml::Task::kmeans, dml::Task::kwindows});
      print_summary(dml::run_experiment(cfg, out), out);
    }
    return ok;
  } catch (const dml::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const dml::InvalidArgument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const dml::RankDeficiency& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return numerical_error;
  } catch (const dml::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return numerical_error;
  } catch (const dml::ParseError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return io_error;
  } catch (const dml::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return io_error;
  } catch (const dml::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return numerical_error;
  }
}
