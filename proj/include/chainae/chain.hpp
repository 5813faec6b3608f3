#pragma once

// Two-stage generator chaining: G1 attacks the screened corpus, an
// independent oracle splits its outputs into evasive_1 / failed_1, and G2
// attacks the failed_1 adversarial examples.

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "chainae/detector.hpp"
#include "chainae/generators.hpp"
#include "json.hpp"

namespace chainae::chain {

using detectors::DetectorPtr;
using detectors::Verdict;

/// Percentages. evasion_rate throws ZeroTotal, relative_improvement throws
/// ZeroBaseline.
double evasion_rate(std::size_t misclassified, std::size_t total);
double relative_improvement(double combined, double baseline);

/// Verdicts keyed by content digest: each distinct byte string reaches the
/// oracle once. Safe for concurrent use.
class OracleCache {
 public:
  explicit OracleCache(DetectorPtr oracle) : oracle_(std::move(oracle)) {}

  const std::string& id() const { return oracle_->id(); }
  const DetectorPtr& detector() const { return oracle_; }
  Verdict score(ByteView bytes, const std::string& digest);
  Verdict score(ByteView bytes) { return score(bytes, sha256_hex(bytes)); }
  std::size_t hits() const;
  std::size_t misses() const;

 private:
  DetectorPtr oracle_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, Verdict> cache_;
  std::size_t hits_ = 0, misses_ = 0;
};

struct AttackSample {
  std::string id;
  Bytes bytes;  // genuine form
};

struct ScreenResult {
  std::vector<std::string> kept;
  std::vector<std::string> screened_out;
};

/// Keeps the samples the oracle labels malicious in genuine form.
/// Throws EmptyAfterScreening when nothing is left.
ScreenResult screen_corpus(std::span<const AttackSample> samples, OracleCache& oracle);

/// How a generator is built for each corpus run.
struct GeneratorSpec {
  generators::GeneratorConfig config;
  DetectorPtr target;
  std::shared_ptr<const generators::Policy> policy;  // TrainedPolicy only

  const std::string& id() const { return config.id; }
  std::unique_ptr<generators::Generator> build() const;
};

/// One generator run on one sample.
struct StageRecord {
  std::string sample_id;
  std::string generator;
  std::string first_stage;  // empty for stage 1
  std::string target;
  std::string input_digest;
  std::string output_digest;
  bool evasive_vs_target = false;
  generators::RunStatus status = generators::RunStatus::Completed;
  std::string reason;
  std::size_t target_queries = 0;
  std::size_t actions_applied = 0;
  std::size_t max_episode_actions = 0;
  std::size_t episodes = 0;
  std::size_t iterations = 0;
  std::string trace_jsonl;
  nlohmann::json payload;
  double elapsed_ms = 0.0;
  std::vector<std::uint8_t> oracle_benign;  // per oracle, in runner order
};

struct ChainOutcome {
  std::string g1, g2, oracle;
  std::vector<std::string> evasive_1, evasive_2, failed_2, screened_out;
  std::map<std::string, std::string> ae_digest;  // final AE per screened sample
  std::map<std::string, std::string> failure_reason;

  std::size_t total() const { return evasive_1.size() + evasive_2.size() + failed_2.size(); }
  double rate() const { return evasion_rate(evasive_1.size() + evasive_2.size(), total()); }
  double baseline_rate() const { return evasion_rate(evasive_1.size(), total()); }
};

struct Stats {
  double min = 0.0, avg = 0.0, max = 0.0;
  std::size_t count = 0;  // cells that entered the statistic
};

/// min/avg/max of the defined values; all-zero with count 0 if none.
Stats summarize(std::span<const std::optional<double>> values);

struct CellReport {
  std::string g1, g2;
  std::size_t evasive_1 = 0, evasive_2 = 0, failed_2 = 0, total = 0;
  double rate = 0.0;
  double baseline = 0.0;
  std::optional<double> relative;  // undefined when baseline == 0
};

struct OracleReport {
  std::string oracle;
  std::size_t screened = 0;
  std::size_t screened_out = 0;
  std::vector<double> baseline;   // per generator, single-pass rate
  std::vector<CellReport> cells;  // row-major: g1 major, g2 minor
  Stats absolute, relative;
};

struct EvasionReport {
  std::vector<std::string> generators;
  std::vector<OracleReport> oracles;
  std::vector<double> averaged_baseline;                  // mean over oracles
  std::vector<double> averaged;                           // N*N, mean over oracles
  std::vector<std::optional<double>> averaged_relative;   // vs averaged baseline of the row
  Stats averaged_absolute, averaged_relative_stats;

  std::size_t n() const { return generators.size(); }
  double cell(std::size_t g1, std::size_t g2) const { return averaged[g1 * n() + g2]; }
};

nlohmann::json to_json(const EvasionReport& report);

enum class SecondStageInput { Ae, Genuine };

/// Called once per generator run with the genuine sample, the stage input and
/// the output. May be called from several threads at once.
using OutputHook = std::function<void(const StageRecord&, ByteView genuine, ByteView input, ByteView output)>;

struct ChainOptions {
  std::size_t jobs = 1;
  std::uint64_t seed = 0;
  SecondStageInput second_stage_input = SecondStageInput::Ae;
  OutputHook on_output;
};

/// Runs stage 1 once per generator and stage 2 once per (G1, G2), both over
/// the union of what the configured oracles keep / fail, then splits per
/// oracle. Results are cached, so pair_matrix after baseline reuses stage 1.
class ChainRunner {
 public:
  ChainRunner(std::vector<AttackSample> samples, std::vector<GeneratorSpec> generators,
              std::vector<DetectorPtr> oracles, ChainOptions options);

  const std::vector<GeneratorSpec>& generators() const { return specs_; }
  std::size_t oracle_count() const { return oracles_.size(); }
  const std::string& oracle_id(std::size_t o) const { return oracles_.at(o)->id(); }
  const ScreenResult& screening(std::size_t oracle) const { return screens_[oracle]; }

  /// Stage-1 records of generator g over the union of kept samples, sorted by id.
  const std::vector<StageRecord>& stage_one(std::size_t g);
  /// Stage-2 records of G2 on G1's failures.
  const std::vector<StageRecord>& stage_two(std::size_t g1, std::size_t g2);

  ChainOutcome chain_pair(std::size_t g1, std::size_t g2, std::size_t oracle);
  /// Single-pass rate of g against one oracle, and its (evasive, total) counts.
  double baseline_rate(std::size_t g, std::size_t oracle);
  std::pair<std::size_t, std::size_t> baseline_counts(std::size_t g, std::size_t oracle);
  EvasionReport pair_matrix();

  /// Every record produced so far, stage 1 first, in deterministic order.
  std::vector<const StageRecord*> records() const;

 private:
  std::vector<StageRecord> run_stage(const GeneratorSpec& spec, const std::vector<std::size_t>& sample_idx,
                                     const std::vector<ByteView>& inputs, const std::string& first_stage,
                                     std::uint64_t stage_tag, std::vector<std::shared_ptr<const Bytes>>* keep);

  std::vector<AttackSample> samples_;  // sorted by id
  std::vector<GeneratorSpec> specs_;
  std::vector<std::unique_ptr<OracleCache>> oracles_;
  ChainOptions options_;
  std::vector<ScreenResult> screens_;
  std::vector<std::vector<std::uint8_t>> kept_by_;  // [oracle][sample]
  std::vector<std::size_t> union_kept_;             // sample indices, id order

  std::vector<std::optional<std::vector<StageRecord>>> stage1_;  // aligned with union_kept_
  std::vector<std::vector<std::shared_ptr<const Bytes>>> stage1_bytes_;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<StageRecord>> stage2_;  // sorted by sample id
};

}  // namespace chainae::chain
