#pragma once

// The five adversarial-example generators behind one interface.

#include <array>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "chainae/byte_model.hpp"
#include "chainae/detector.hpp"
#include "chainae/policy.hpp"
#include "chainae/transforms.hpp"
#include "json.hpp"

namespace chainae::generators {

enum class GeneratorKind { Random, TrainedPolicy, Mab, Fgsm, PartialDos };

inline constexpr std::array<GeneratorKind, 5> kAllGeneratorKinds = {
    GeneratorKind::Random, GeneratorKind::TrainedPolicy, GeneratorKind::Mab, GeneratorKind::Fgsm,
    GeneratorKind::PartialDos};

std::string_view to_string(GeneratorKind k);
GeneratorKind generator_kind_from_string(std::string_view s);

inline constexpr std::size_t kMaxPayloadSize = 1000;
inline constexpr std::size_t kDosFirstFree = 2;
inline constexpr std::size_t kDosEndFree = 60;  // e_lfanew starts here

struct GeneratorConfig {
  GeneratorKind kind = GeneratorKind::Random;
  std::string id;                        // empty: the kind name
  std::size_t max_actions = 50;          // Random, TrainedPolicy
  std::size_t actions_per_episode = 10;  // Mab
  std::size_t episodes = 60;             // Mab
  std::size_t iterations = 100;          // Fgsm
  std::size_t rounds = 100;              // PartialDos
  std::size_t payload_size = 512;        // Fgsm
  double epsilon = 0.05;                 // Fgsm, PartialDos
  double pool_temperature = 1.0;         // Fgsm, PartialDos; 0 = exact max-pool gradient
  double size_cap_factor = 2.0;          // output size <= factor * genuine size
  std::uint64_t seed = 0;

  /// Throws ConfigError for zero budgets or an oversized payload.
  void validate() const;
};

GeneratorConfig default_config(GeneratorKind kind);
nlohmann::json to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& doc);

enum class RunStatus { Completed, Skipped, Failed };
std::string_view to_string(RunStatus s);

struct GeneratorResult {
  Bytes output;
  bool evasive_vs_target = false;
  RunStatus status = RunStatus::Completed;
  std::string reason;  // set for Skipped / Failed

  transforms::ActionTrace trace;  // action-based generators
  nlohmann::json payload;         // gradient generators: region and iteration count

  std::size_t target_queries = 0;
  std::size_t actions_applied = 0;      // Random / TrainedPolicy: applied actions
  std::size_t max_episode_actions = 0;  // Mab: most actions applied in one episode
  std::size_t episodes = 0;             // Mab
  std::size_t iterations = 0;           // Fgsm / PartialDos
  std::vector<double> score_series;     // target score after each iteration
  double elapsed_ms = 0.0;
};

struct AttackInput {
  std::string sample_id;
  ByteView bytes;
  /// Reference size for the growth cap; 0 means bytes.size(). Chains pass
  /// the genuine sample's size so a second stage cannot compound growth.
  std::size_t genuine_size = 0;
  std::uint64_t seed = 0;
};

class Generator {
 public:
  Generator(GeneratorConfig config, detectors::DetectorPtr target);
  virtual ~Generator() = default;

  const std::string& id() const { return config_.id; }
  const GeneratorConfig& config() const { return config_; }
  const detectors::Detector& target() const { return *target_; }
  const detectors::DetectorPtr& target_ptr() const { return target_; }

  /// True when runs share mutable state and must be issued in a fixed order.
  virtual bool sequential() const { return false; }

  /// Runs the attack. Queries go through a counting wrapper, so
  /// target_queries is exact.
  GeneratorResult run(const AttackInput& input);

 protected:
  virtual GeneratorResult attack(const AttackInput& input, const detectors::Detector& target) = 0;
  std::size_t size_cap(const AttackInput& input) const;

  GeneratorConfig config_;
  detectors::DetectorPtr target_;
};

class RandomGenerator final : public Generator {
 public:
  using Generator::Generator;

 protected:
  GeneratorResult attack(const AttackInput& input, const detectors::Detector& target) override;
};

class PolicyGenerator final : public Generator {
 public:
  PolicyGenerator(GeneratorConfig config, detectors::DetectorPtr target, Policy policy);
  const Policy& policy() const { return policy_; }

 protected:
  GeneratorResult attack(const AttackInput& input, const detectors::Detector& target) override;

 private:
  Policy policy_;
};

/// Per-arm Beta posterior; alpha = 1 + successes, beta = 1 + failures.
struct ArmStats {
  std::array<std::size_t, transforms::kActionKindCount> successes{};
  std::array<std::size_t, transforms::kActionKindCount> failures{};
};

class MabGenerator final : public Generator {
 public:
  using Generator::Generator;

  bool sequential() const override { return true; }
  ArmStats arms() const;

 protected:
  GeneratorResult attack(const AttackInput& input, const detectors::Detector& target) override;

 private:
  mutable std::mutex mu_;
  ArmStats arms_;
};

/// Shared loop of the two white-box generators.
class GradientGenerator final : public Generator {
 public:
  GradientGenerator(GeneratorConfig config, detectors::DetectorPtr target);

 protected:
  GeneratorResult attack(const AttackInput& input, const detectors::Detector& target) override;

 private:
  const detectors::ByteEmbedModel& model_;
};

/// Factory. TrainedPolicy requires `policy`; Fgsm/PartialDos require a
/// white-box target. Throws ConfigError otherwise.
std::unique_ptr<Generator> make_generator(const GeneratorConfig& config, detectors::DetectorPtr target,
                                          const Policy* policy = nullptr);

/// Beta(a, b) draw from two gamma variates (Marsaglia-Tsang).
double sample_beta(Rng& rng, double a, double b);

}  // namespace chainae::generators
