#pragma once

// Experiment orchestration behind the CLI verbs: corpus, train, baseline,
// matrix, report, serve. All artifacts land under one output directory.
//
//   out/config.json            resolved configuration (output path excluded)
//   out/corpus/                manifest.json + samples/
//   out/models/                one JSON per model, train_report.json
//   out/baseline/              baseline.csv, baseline.json
//   out/matrix/                per-oracle and averaged CSV/SVG, matrix.json,
//                              cells.csv, stats.csv, records.jsonl
//   out/summary.md
//   out/logs/results.jsonl     timings; the only non-deterministic file

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "chainae/artifacts.hpp"
#include "chainae/chain.hpp"
#include "chainae/corpus.hpp"
#include "chainae/models.hpp"
#include "chainae/scan_service.hpp"
#include "json.hpp"

namespace chainae::experiment {

struct GeneratorEntry {
  generators::GeneratorConfig config;
  std::string target;  // detector id
};

struct OracleEntry {
  std::string detector;  // detector id, in-process or on the service
  std::string remote;    // "host:port" of a scan service; empty: in-process
};

struct ServiceSection {
  std::string bind;                     // empty: $CHAINAE_SCAN_BIND, else 127.0.0.1:8765
  double rate_limit = 0.0;              // requests per second; <= 0 disables
  double burst = 10.0;
  std::string cache_dir = "scan-cache";  // relative paths resolve under `out`
  std::size_t client_retries = 3;       // for remote oracles
};

struct ExperimentConfig {
  std::uint64_t seed = 1;  // corpus seed and chain seed
  std::size_t jobs = 1;
  std::string out = "out";
  corpus::CorpusConfig corpus;
  models::SuiteConfig detectors;
  std::vector<GeneratorEntry> generators;
  std::vector<OracleEntry> oracles;
  chain::SecondStageInput second_stage_input = chain::SecondStageInput::Ae;
  std::size_t attack_limit = 0;  // attack the first N eval malicious samples by id; 0 = all
  ServiceSection service;
};

/// All five generators with their default targets and the three B oracles.
ExperimentConfig default_experiment();
std::vector<GeneratorEntry> default_generators();
std::vector<OracleEntry> default_oracles();

/// The captured form: every field except `out`.
nlohmann::json to_json(const ExperimentConfig& c);
/// Missing sections keep their defaults. Throws ConfigError for unknown keys
/// or unusable values.
ExperimentConfig experiment_from_json(const nlohmann::json& doc);
ExperimentConfig load_experiment(const std::string& path);

using Progress = std::function<void(const std::string&)>;

class Experiment {
 public:
  explicit Experiment(ExperimentConfig config, Progress progress = {});

  const ExperimentConfig& config() const { return config_; }

  /// Reuses out/corpus when its manifest matches the configuration,
  /// otherwise generates and writes it.
  const corpus::Corpus& corpus();
  /// Same for out/models.
  const models::Suite& models();

  std::vector<chain::GeneratorSpec> generator_specs();
  std::vector<detectors::DetectorPtr> oracles();
  std::vector<chain::AttackSample> attack_samples();

  void cmd_corpus();
  nlohmann::json cmd_train();
  artifacts::BaselineTable cmd_baseline();
  chain::EvasionReport cmd_matrix(chain::OutputHook hook = {});
  /// Runs the verdict service until `stop` returns true (polled).
  void cmd_serve(const std::function<bool()>& stop);

 private:
  std::string path(const std::string& rel) const;
  void capture_config() const;
  void log_result(const std::string& verb, nlohmann::json fields, double seconds) const;
  chain::ChainRunner make_runner(chain::OutputHook hook);

  ExperimentConfig config_;
  Progress progress_;
  std::optional<corpus::Corpus> corpus_;
  std::optional<models::Suite> models_;
};

/// Writes out/summary.md from the matrix (and baseline) artifacts and returns
/// it. Throws MissingArtifacts when no matrix run exists under `out`.
std::string cmd_report(const std::string& out);

}  // namespace chainae::experiment
