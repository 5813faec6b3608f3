#pragma once

// Small MalConv-style scorer: byte embedding (256 values + padding token),
// non-overlapping width-8 convolution, global max pool, dense logistic output.
//
//   act[f][t] = sum_k sum_d W[f][k][d] * E[token(8t+k)][d]
//   h[f]      = max_t act[f][t]          (first maximum wins)
//   logit     = b + sum_f w[f] * h[f],   score = sigmoid(logit)
//
// The attack loss is L = -log(1 - score) = softplus(logit); descending it
// lowers the malicious score. Its gradient w.r.t. the embedding at position
// p = 8t + k is  score * sum_{f : argmax_f == t} w[f] * W[f][k][:].

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "chainae/detector.hpp"
#include "json.hpp"

namespace chainae::detectors {

inline constexpr std::size_t kVocab = 257;
inline constexpr std::uint16_t kPadToken = 256;
inline constexpr std::size_t kEmbedDim = 8;
inline constexpr std::size_t kFilters = 16;
inline constexpr std::size_t kWindow = 8;
inline constexpr std::size_t kDefaultTruncation = 65536;

using Embedding = std::array<double, kEmbedDim>;

struct ByteModelParams {
  std::vector<double> embedding = std::vector<double>(kVocab * kEmbedDim);        // [v][d]
  std::vector<double> filters = std::vector<double>(kFilters * kWindow * kEmbedDim);  // [f][k][d]
  std::array<double, kFilters> dense{};
  double dense_bias = 0.0;
  double threshold = 0.5;
  std::size_t truncation = kDefaultTruncation;

  double& filter(std::size_t f, std::size_t k, std::size_t d) { return filters[(f * kWindow + k) * kEmbedDim + d]; }
  double filter(std::size_t f, std::size_t k, std::size_t d) const { return filters[(f * kWindow + k) * kEmbedDim + d]; }
  double& embed(std::size_t v, std::size_t d) { return embedding[v * kEmbedDim + d]; }
  double embed(std::size_t v, std::size_t d) const { return embedding[v * kEmbedDim + d]; }
};

/// Per-filter pooled activation and the window it came from.
struct Pooled {
  std::array<double, kFilters> value;
  std::array<std::size_t, kFilters> window;
  std::size_t windows = 0;
};

class ByteEmbedModel {
 public:
  explicit ByteEmbedModel(ByteModelParams params);

  const ByteModelParams& params() const { return params_; }
  std::size_t truncation() const { return params_.truncation; }
  double threshold() const { return params_.threshold; }

  /// Token count after truncation and padding to a whole window (at least one).
  std::size_t token_count(std::size_t byte_len) const;
  std::uint16_t token_at(ByteView bytes, std::size_t pos) const {
    return pos < bytes.size() && pos < params_.truncation ? bytes[pos] : kPadToken;
  }

  Pooled pool(ByteView bytes) const;
  /// Pools only windows [first, last); used to cache the fixed part of a file.
  Pooled pool_range(ByteView bytes, std::size_t first, std::size_t last) const;
  double logit(ByteView bytes) const;
  double probability(ByteView bytes) const;

  /// dL/dE at each requested position. Positions past the padded input have
  /// no window and get a zero gradient. Throws PositionOutOfRange for
  /// positions >= truncation.
  std::vector<Embedding> embedding_gradient(ByteView bytes, std::span<const std::size_t> positions) const;

  Embedding embedding_of(std::uint16_t token) const;
  /// Nearest byte value (padding excluded) by Euclidean distance; ties go to
  /// the lowest byte.
  std::uint8_t nearest_byte(const Embedding& z) const;

  /// Activation of filter f over window t with some positions overridden.
  /// `override_at(pos)` returns a pointer to a replacement embedding or null.
  template <typename Override>
  double window_activation(ByteView bytes, std::size_t f, std::size_t t, Override&& override_at) const {
    double acc = 0.0;
    for (std::size_t k = 0; k < kWindow; ++k) {
      const std::size_t pos = t * kWindow + k;
      const double* z = override_at(pos);
      const double* e = z ? z : &params_.embedding[token_at(bytes, pos) * kEmbedDim];
      const double* w = &params_.filters[(f * kWindow + k) * kEmbedDim];
      for (std::size_t d = 0; d < kEmbedDim; ++d) acc += w[d] * e[d];
    }
    return acc;
  }

 private:
  ByteModelParams params_;
  std::vector<double> table_;  // [k][v][f] = sum_d W[f][k][d] * E[v][d]
};

/// Evaluates the model when the embeddings of token positions [begin, end)
/// are free vectors. Windows that do not touch the range are pooled once at
/// construction.
class EmbeddingProbe {
 public:
  EmbeddingProbe(const ByteEmbedModel& model, ByteView bytes, std::size_t begin, std::size_t end);

  struct Result {
    double logit = 0.0;
    double probability = 0.0;
    double loss = 0.0;                // softplus(logit)
    std::vector<Embedding> gradient;  // dL/dz for each free position
  };

  /// temperature 0: exact gradient of the model. temperature > 0: gradient
  /// through a log-sum-exp relaxation of the max pool, which also reaches
  /// free windows that are not (yet) the argmax. logit/probability/loss are
  /// always exact.
  Result evaluate(std::span<const Embedding> free, double temperature = 0.0) const;

 private:
  const ByteEmbedModel& model_;
  ByteView bytes_;
  std::size_t begin_, end_;
  std::size_t first_window_, last_window_;  // mutable windows [first, last)
  Pooled fixed_;
};

struct ByteModelConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 32;
  double learning_rate = 0.03;  // Adam step size
  double embed_init_scale = 1.0;
  std::size_t truncation = kDefaultTruncation;
  std::uint64_t seed = 11;
};

/// Seeded random embedding and filters, zero dense layer: an untrained model
/// scores exactly 0.5 everywhere.
ByteModelParams initial_byte_params(const ByteModelConfig& config);

/// Mini-batch Adam on binary cross-entropy. Throws DegenerateCorpus for a
/// single-class input.
ByteEmbedModel train_byte_model(std::span<const TrainingExample> examples, const ByteModelConfig& config,
                                TrainReport* report = nullptr);

nlohmann::json to_json(const ByteEmbedModel& model);
ByteEmbedModel byte_model_from_json(const nlohmann::json& doc);

class ByteModelDetector final : public Detector {
 public:
  ByteModelDetector(std::string id, ByteEmbedModel model) : id_(std::move(id)), model_(std::move(model)) {}

  const std::string& id() const override { return id_; }
  double threshold() const override { return model_.threshold(); }
  Verdict score(ByteView bytes) const override {
    return make_verdict(model_.probability(bytes), model_.threshold(), id_);
  }
  const ByteEmbedModel* white_box() const override { return &model_; }
  const ByteEmbedModel& model() const { return model_; }

 private:
  std::string id_;
  ByteEmbedModel model_;
};

}  // namespace chainae::detectors
