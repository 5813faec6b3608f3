#pragma once

// Softmax action-kind policy, linear in standardized features, trained with
// REINFORCE against a moving-average reward baseline.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "chainae/detector.hpp"
#include "chainae/features.hpp"
#include "chainae/transforms.hpp"
#include "json.hpp"

namespace chainae::generators {

using transforms::kActionKindCount;

class Policy {
 public:
  /// Uniform policy: zero weights, identity standardization.
  Policy();

  std::array<double, kActionKindCount> probabilities(const features::FeatureVector& x) const;
  transforms::ActionKind sample(const features::FeatureVector& x, Rng& rng) const;

  // weights [a][j], bias [a], feature mean/scale [j]
  std::vector<double> weights;
  std::vector<double> bias;
  std::vector<double> mean;
  std::vector<double> inv_scale;

  bool operator==(const Policy&) const = default;

 private:
  std::array<double, kActionKindCount> logits(const features::FeatureVector& x) const;
};

struct PolicyConfig {
  std::size_t episodes = 300;
  std::size_t max_actions = 50;
  double learning_rate = 0.01;
  double entropy_bonus = 0.05;
  double baseline_decay = 0.9;
  double action_cost = 0.01;
  double evasion_reward = 1.0;
  double size_cap_factor = 2.0;
  std::uint64_t seed = 13;
};

struct PolicyTrainStats {
  std::size_t episodes = 0;
  std::size_t evasions = 0;
  double final_baseline = 0.0;
};

/// Episodes cycle over `samples` in a seeded order. Throws DegenerateCorpus
/// when `samples` is empty.
Policy train_policy(std::span<const ByteView> samples, const detectors::Detector& target, const PolicyConfig& config,
                    PolicyTrainStats* stats = nullptr);

nlohmann::json to_json(const Policy& policy);
Policy policy_from_json(const nlohmann::json& doc);

}  // namespace chainae::generators
