#pragma once

#include <atomic>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "chainae/common.hpp"

namespace chainae::detectors {

class ByteEmbedModel;

struct Verdict {
  double score = 0.0;  // probability of malicious
  bool malicious = false;
  std::string detector_id;
  double threshold = 0.5;

  bool operator==(const Verdict&) const = default;
};

/// The single place a label is derived from a score.
inline Verdict make_verdict(double score, double threshold, std::string id) {
  return {score, score >= threshold, std::move(id), threshold};
}

/// Anything that turns bytes into a verdict: an in-process model, an
/// ensemble, a cache, or a remote scan service.
class Detector {
 public:
  virtual ~Detector() = default;
  virtual const std::string& id() const = 0;
  virtual double threshold() const = 0;
  virtual Verdict score(ByteView bytes) const = 0;
  /// Non-null for detectors whose gradients are available to white-box attacks.
  virtual const ByteEmbedModel* white_box() const { return nullptr; }
};

using DetectorPtr = std::shared_ptr<const Detector>;

/// Counts score() calls; forwards everything else.
class CountingDetector final : public Detector {
 public:
  explicit CountingDetector(const Detector& inner) : inner_(inner) {}

  const std::string& id() const override { return inner_.id(); }
  double threshold() const override { return inner_.threshold(); }
  Verdict score(ByteView bytes) const override {
    calls_.fetch_add(1, std::memory_order_relaxed);
    return inner_.score(bytes);
  }
  const ByteEmbedModel* white_box() const override { return inner_.white_box(); }

  std::size_t calls() const { return calls_.load(); }

 private:
  const Detector& inner_;
  mutable std::atomic<std::size_t> calls_{0};
};

/// Equal-weight mean of member scores with its own threshold.
class AverageDetector final : public Detector {
 public:
  AverageDetector(std::string id, std::vector<DetectorPtr> members, double threshold);

  const std::string& id() const override { return id_; }
  double threshold() const override { return threshold_; }
  Verdict score(ByteView bytes) const override;
  double mean_score(ByteView bytes) const;
  const std::vector<DetectorPtr>& members() const { return members_; }
  void set_threshold(double t) { threshold_ = t; }

 private:
  std::string id_;
  std::vector<DetectorPtr> members_;
  double threshold_;
};

struct TrainingExample {
  ByteView bytes;
  bool malicious = false;
};

struct TrainReport {
  std::size_t train_size = 0;
  std::size_t validation_size = 0;
  std::size_t test_size = 0;
  double threshold = 0.5;
  double validation_balanced_accuracy = 0.0;
  double heldout_accuracy = 0.0;  // on the test part, at the chosen threshold
};

/// Deterministic 70/15/15 train/validation/test partition of example indices.
struct DataSplit {
  std::vector<std::size_t> train, validation, test;
};
DataSplit split_examples(std::size_t n, std::uint64_t seed);

/// Threshold maximizing balanced accuracy over (score, label) pairs; the
/// midpoint between adjacent distinct scores, first maximum in ascending order.
double best_balanced_threshold(std::span<const double> scores, std::span<const std::uint8_t> labels);
double accuracy_at(std::span<const double> scores, std::span<const std::uint8_t> labels, double threshold);
double balanced_accuracy_at(std::span<const double> scores, std::span<const std::uint8_t> labels, double threshold);

}  // namespace chainae::detectors
