// chainae: corpus generation, detector training, generator chaining runs and
// the local verdict service.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "chainae/experiment.hpp"

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop.store(true); }

}  // namespace

int main(int argc, char** argv) {
  using namespace chainae;

  CLI::App app{"Adversarial-example generator chaining against static binary classifiers"};
  app.require_subcommand(1);
  std::string config_path, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  bool quiet = false;
  app.add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "overrides the config seed");
  app.add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", out, "output directory (default: config value or ./out)");
  app.add_flag("-q,--quiet", quiet, "no progress lines");

  auto* corpus_cmd = app.add_subcommand("corpus", "generate the labeled synthetic corpus");
  auto* train_cmd = app.add_subcommand("train", "train surrogate detectors, oracle members and the policy");
  auto* baseline_cmd = app.add_subcommand("baseline", "single-pass evasion rate per (generator, oracle)");
  auto* matrix_cmd = app.add_subcommand("matrix", "all generator pairs, per oracle and averaged");
  auto* report_cmd = app.add_subcommand("report", "markdown summary of the matrix artifacts");
  auto* serve_cmd = app.add_subcommand("serve", "run the verdict service until interrupted");
  std::string bind;
  serve_cmd->add_option("--bind", bind, std::string("host:port (default: $") + scan::kBindEnv + " or " +
                                            scan::kDefaultBind + ")");
  std::string cache_dir;
  serve_cmd->add_option("--cache-dir", cache_dir, "verdict cache directory");
  std::optional<double> rate;
  serve_cmd->add_option("--rate-limit", rate, "requests per second (0 disables)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  auto progress = [quiet](const std::string& line) {
    if (!quiet) std::fprintf(stderr, "[chainae] %s\n", line.c_str());
  };

  try {
    experiment::ExperimentConfig cfg =
        config_path.empty() ? experiment::default_experiment() : experiment::load_experiment(config_path);
    if (seed) cfg.seed = *seed;
    if (jobs) cfg.jobs = *jobs;
    if (!out.empty()) cfg.out = out;
    if (!bind.empty()) {
      scan::parse_endpoint(bind);
      cfg.service.bind = bind;
    }
    if (!cache_dir.empty()) cfg.service.cache_dir = cache_dir;
    if (rate) cfg.service.rate_limit = *rate;

    if (*report_cmd) {
      std::cout << experiment::cmd_report(cfg.out);
      return 0;
    }
    experiment::Experiment exp(cfg, progress);
    if (*corpus_cmd) {
      exp.cmd_corpus();
    } else if (*train_cmd) {
      std::cout << exp.cmd_train().dump(2) << '\n';
    } else if (*baseline_cmd) {
      std::cout << artifacts::baseline_csv(exp.cmd_baseline());
    } else if (*matrix_cmd) {
      const auto report = exp.cmd_matrix();
      std::cout << artifacts::stats_csv(report);
    } else if (*serve_cmd) {
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      exp.cmd_serve([] { return g_stop.load(); });
    }
    return 0;
  } catch (const Error& e) {
    std::fprintf(stderr, "chainae: %s\n", e.what());
    return e.code() == ErrorCode::ConfigError ? 2 : 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "chainae: %s\n", e.what());
    return 3;
  }
}
