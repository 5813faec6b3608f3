#pragma once

// Shared fixtures for the unit tests.

#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "chainae/byte_model.hpp"
#include "chainae/corpus.hpp"
#include "chainae/detector.hpp"
#include "chainae/pe.hpp"

namespace chainae::testing {

inline Bytes sample(corpus::Label label, std::uint64_t seed, std::size_t min_size = 4096,
                    std::size_t max_size = 65536) {
  return corpus::generate_sample(corpus::ContentModel::standard(), label, seed, min_size, max_size);
}

inline Bytes malicious(std::uint64_t seed) { return sample(corpus::Label::Malicious, seed); }
inline Bytes benign(std::uint64_t seed) { return sample(corpus::Label::Benign, seed); }

/// Detector defined by a plain function of the bytes.
class FnDetector final : public detectors::Detector {
 public:
  using Fn = std::function<double(ByteView)>;
  FnDetector(std::string id, Fn fn, double threshold = 0.5)
      : id_(std::move(id)), fn_(std::move(fn)), threshold_(threshold) {}

  const std::string& id() const override { return id_; }
  double threshold() const override { return threshold_; }
  detectors::Verdict score(ByteView bytes) const override {
    return detectors::make_verdict(fn_(bytes), threshold_, id_);
  }

 private:
  std::string id_;
  Fn fn_;
  double threshold_;
};

/// Malicious while the file is at most `limit` bytes.
inline detectors::DetectorPtr size_detector(std::string id, std::size_t limit) {
  return std::make_shared<FnDetector>(std::move(id), [limit](ByteView b) { return b.size() <= limit ? 0.9 : 0.1; });
}

/// Byte model with random embedding, filters and dense layer, so every
/// filter contributes to the logit.
inline detectors::ByteEmbedModel random_byte_model(std::uint64_t seed,
                                                   std::size_t truncation = detectors::kDefaultTruncation,
                                                   double threshold = 0.5) {
  detectors::ByteModelConfig cfg;
  cfg.seed = seed;
  cfg.truncation = truncation;
  detectors::ByteModelParams p = detectors::initial_byte_params(cfg);
  Rng rng(seed ^ 0xABCDEF);
  for (auto& w : p.dense) w = 0.3 * normal(rng);
  p.dense_bias = -0.2;
  p.threshold = threshold;
  return detectors::ByteEmbedModel(p);
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("chainae-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string operator/(const std::string& rel) const { return (path_ / rel).string(); }

 private:
  std::filesystem::path path_;
};

inline bool valid_pe(ByteView bytes) {
  try {
    return pe::validate(pe::parse(bytes)).empty();
  } catch (const Error&) {
    return false;
  }
}

}  // namespace chainae::testing
