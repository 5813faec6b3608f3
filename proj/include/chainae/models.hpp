#pragma once

// The trained model suite of one experiment: surrogate targets (A), oracle
// members (B), their equal-weight ensemble, and the action policy.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "chainae/byte_model.hpp"
#include "chainae/corpus.hpp"
#include "chainae/policy.hpp"
#include "chainae/tree_ensemble.hpp"
#include "json.hpp"

namespace chainae::models {

inline constexpr const char* kTreeA = "tree-A";
inline constexpr const char* kByteA = "byte-A";
inline constexpr const char* kTreeB = "tree-B";
inline constexpr const char* kByteB = "byte-B";
inline constexpr const char* kEnsembleB = "ensemble-B";

struct SuiteConfig {
  detectors::TreeConfig tree_a;
  detectors::ByteModelConfig byte_a;
  detectors::TreeConfig tree_b;
  detectors::ByteModelConfig byte_b;
  generators::PolicyConfig policy;

  SuiteConfig();
};

nlohmann::json to_json(const SuiteConfig& c);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
SuiteConfig suite_config_from_json(const nlohmann::json& doc);

struct Suite {
  std::shared_ptr<const detectors::TreeEnsembleDetector> tree_a, tree_b;
  std::shared_ptr<const detectors::ByteModelDetector> byte_a, byte_b;
  std::shared_ptr<const detectors::AverageDetector> ensemble_b;
  std::shared_ptr<const generators::Policy> policy;

  std::map<std::string, detectors::TrainReport> reports;  // by detector id
  generators::PolicyTrainStats policy_stats;
  double ensemble_calibration_balanced_accuracy = 0.0;

  std::vector<detectors::DetectorPtr> detectors() const;
  /// Throws ConfigError for an unknown id.
  detectors::DetectorPtr find(const std::string& id) const;
};

/// Trains A models on the DetectorA split and B models on the DetectorB split.
/// The ensemble threshold is calibrated on the Policy split, which neither
/// member has seen; the policy is trained against tree-A on the malicious
/// Policy samples. Models train concurrently on up to `jobs` threads.
Suite train_suite(const corpus::Corpus& corpus, const SuiteConfig& config, std::size_t jobs = 1);

/// Writes one JSON document per model plus train_report.json into `dir`.
void save_suite(const Suite& suite, const std::string& dir);
/// Throws MissingArtifacts when a model file is absent.
Suite load_suite(const std::string& dir);

nlohmann::json to_json(const detectors::TrainReport& r);
nlohmann::json train_report_json(const Suite& suite);

}  // namespace chainae::models
