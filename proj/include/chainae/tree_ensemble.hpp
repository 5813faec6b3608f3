#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "chainae/detector.hpp"
#include "chainae/features.hpp"
#include "json.hpp"

namespace chainae::detectors {

/// Internal nodes route x[feature] <= split to `left`. Leaves have feature < 0.
struct TreeNode {
  std::int32_t feature = -1;
  double split = 0.0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  double value = 0.0;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  double predict(const features::FeatureVector& x) const;
};

struct TreeEnsembleModel {
  std::vector<RegressionTree> trees;
  double learning_rate = 0.1;
  double base_score = 0.0;
  double threshold = 0.5;

  /// base + lr * (sum of tree outputs, accumulated in tree order)
  double margin(const features::FeatureVector& x) const;
  double probability(const features::FeatureVector& x) const;
};

struct TreeConfig {
  std::size_t rounds = 100;
  std::size_t max_depth = 3;
  double learning_rate = 0.1;
  double l2 = 1.0;
  double min_child_hessian = 1e-3;
  std::size_t max_bins = 64;
  std::uint64_t seed = 7;
};

/// Logistic-loss gradient boosting with histogram split finding and Newton
/// leaf values. Throws DegenerateCorpus if only one class is present.
TreeEnsembleModel train_tree_ensemble(std::span<const TrainingExample> examples, const TreeConfig& config,
                                      TrainReport* report = nullptr);
/// Same, on precomputed feature vectors.
TreeEnsembleModel train_tree_ensemble(std::span<const features::FeatureVector> x, std::span<const std::uint8_t> y,
                                      const TreeConfig& config, TrainReport* report = nullptr);

nlohmann::json to_json(const TreeEnsembleModel& model);
TreeEnsembleModel tree_ensemble_from_json(const nlohmann::json& doc);

class TreeEnsembleDetector final : public Detector {
 public:
  TreeEnsembleDetector(std::string id, TreeEnsembleModel model) : id_(std::move(id)), model_(std::move(model)) {}

  const std::string& id() const override { return id_; }
  double threshold() const override { return model_.threshold; }
  Verdict score(ByteView bytes) const override;
  const TreeEnsembleModel& model() const { return model_; }

 private:
  std::string id_;
  TreeEnsembleModel model_;
};

}  // namespace chainae::detectors
