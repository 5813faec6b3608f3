#include "chainae/byte_model.hpp"

#include <algorithm>
#include <cmath>

#include "chainae/rng.hpp"

namespace chainae::detectors {

using nlohmann::json;

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

Pooled empty_pool() {
  Pooled p;
  p.value.fill(-std::numeric_limits<double>::infinity());
  p.window.fill(0);
  return p;
}

double logit_from(const ByteModelParams& prm, const Pooled& pooled) {
  double z = prm.dense_bias;
  for (std::size_t f = 0; f < kFilters; ++f) z += prm.dense[f] * pooled.value[f];
  return z;
}

}  // namespace

ByteEmbedModel::ByteEmbedModel(ByteModelParams params) : params_(std::move(params)) {
  if (params_.embedding.size() != kVocab * kEmbedDim || params_.filters.size() != kFilters * kWindow * kEmbedDim)
    throw Error(ErrorCode::ProtocolError, "byte model parameter shapes are wrong");
  if (params_.truncation == 0 || params_.truncation % kWindow != 0)
    throw Error(ErrorCode::ProtocolError, "truncation must be a positive multiple of the window");
  table_.assign(kWindow * kVocab * kFilters, 0.0);
  for (std::size_t k = 0; k < kWindow; ++k)
    for (std::size_t v = 0; v < kVocab; ++v)
      for (std::size_t f = 0; f < kFilters; ++f) {
        double acc = 0.0;
        for (std::size_t d = 0; d < kEmbedDim; ++d) acc += params_.filter(f, k, d) * params_.embed(v, d);
        table_[(k * kVocab + v) * kFilters + f] = acc;
      }
}

std::size_t ByteEmbedModel::token_count(std::size_t byte_len) const {
  const std::size_t n = std::min(byte_len, params_.truncation);
  return std::max<std::size_t>(kWindow, (n + kWindow - 1) / kWindow * kWindow);
}

Pooled ByteEmbedModel::pool_range(ByteView bytes, std::size_t first, std::size_t last) const {
  Pooled out = empty_pool();
  out.windows = token_count(bytes.size()) / kWindow;
  last = std::min(last, out.windows);
  const std::size_t n = std::min(bytes.size(), params_.truncation);
  std::array<double, kFilters> acc;
  for (std::size_t t = first; t < last; ++t) {
    acc.fill(0.0);
    const std::size_t base = t * kWindow;
    for (std::size_t k = 0; k < kWindow; ++k) {
      const std::size_t pos = base + k;
      const std::size_t tok = pos < n ? bytes[pos] : kPadToken;
      const double* row = &table_[(k * kVocab + tok) * kFilters];
      for (std::size_t f = 0; f < kFilters; ++f) acc[f] += row[f];
    }
    for (std::size_t f = 0; f < kFilters; ++f)
      if (acc[f] > out.value[f]) {
        out.value[f] = acc[f];
        out.window[f] = t;
      }
  }
  return out;
}

Pooled ByteEmbedModel::pool(ByteView bytes) const {
  return pool_range(bytes, 0, token_count(bytes.size()) / kWindow);
}

double ByteEmbedModel::logit(ByteView bytes) const { return logit_from(params_, pool(bytes)); }

double ByteEmbedModel::probability(ByteView bytes) const { return sigmoid(logit(bytes)); }

std::vector<Embedding> ByteEmbedModel::embedding_gradient(ByteView bytes, std::span<const std::size_t> positions) const {
  for (auto p : positions)
    if (p >= params_.truncation)
      throw Error(ErrorCode::PositionOutOfRange,
                  "position " + std::to_string(p) + " >= truncation " + std::to_string(params_.truncation));
  const Pooled pooled = pool(bytes);
  const double dlogit = sigmoid(logit_from(params_, pooled));
  std::vector<Embedding> out(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    out[i].fill(0.0);
    const std::size_t t = positions[i] / kWindow;
    const std::size_t k = positions[i] % kWindow;
    if (t >= pooled.windows) continue;
    for (std::size_t f = 0; f < kFilters; ++f) {
      if (pooled.window[f] != t) continue;
      const double g = dlogit * params_.dense[f];
      for (std::size_t d = 0; d < kEmbedDim; ++d) out[i][d] += g * params_.filter(f, k, d);
    }
  }
  return out;
}

Embedding ByteEmbedModel::embedding_of(std::uint16_t token) const {
  Embedding e;
  for (std::size_t d = 0; d < kEmbedDim; ++d) e[d] = params_.embed(token, d);
  return e;
}

std::uint8_t ByteEmbedModel::nearest_byte(const Embedding& z) const {
  std::size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < 256; ++v) {
    double dist = 0.0;
    for (std::size_t d = 0; d < kEmbedDim; ++d) {
      const double diff = z[d] - params_.embed(v, d);
      dist += diff * diff;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = v;
    }
  }
  return static_cast<std::uint8_t>(best);
}

// ---------------------------------------------------------------------------

EmbeddingProbe::EmbeddingProbe(const ByteEmbedModel& model, ByteView bytes, std::size_t begin, std::size_t end)
    : model_(model), bytes_(bytes), begin_(begin), end_(end) {
  const std::size_t tokens = model.token_count(bytes.size());
  if (begin >= end || end > tokens || end > model.truncation())
    throw Error(ErrorCode::PositionOutOfRange, "free range must lie inside the padded, truncated input");
  first_window_ = begin / kWindow;
  last_window_ = (end + kWindow - 1) / kWindow;
  const Pooled before = model.pool_range(bytes, 0, first_window_);
  const Pooled after = model.pool_range(bytes, last_window_, tokens / kWindow);
  fixed_ = before;
  for (std::size_t f = 0; f < kFilters; ++f)
    if (after.value[f] > fixed_.value[f]) {
      fixed_.value[f] = after.value[f];
      fixed_.window[f] = after.window[f];
    }
}

EmbeddingProbe::Result EmbeddingProbe::evaluate(std::span<const Embedding> free, double temperature) const {
  if (free.size() != end_ - begin_) throw Error(ErrorCode::PositionOutOfRange, "free vector count mismatch");
  const auto& prm = model_.params();
  auto override_at = [&](std::size_t pos) -> const double* {
    return pos >= begin_ && pos < end_ ? free[pos - begin_].data() : nullptr;
  };

  const std::size_t span = last_window_ - first_window_;
  std::vector<double> act(span * kFilters);
  for (std::size_t t = first_window_; t < last_window_; ++t)
    for (std::size_t f = 0; f < kFilters; ++f)
      act[(t - first_window_) * kFilters + f] = model_.window_activation(bytes_, f, t, override_at);

  // Windows before the free range precede it in index order, so a tie with a
  // fixed window keeps the earlier one exactly as a full pass would.
  Pooled pooled = fixed_;
  for (std::size_t t = first_window_; t < last_window_; ++t)
    for (std::size_t f = 0; f < kFilters; ++f) {
      const double a = act[(t - first_window_) * kFilters + f];
      const bool earlier = pooled.window[f] < t;
      if (a > pooled.value[f] || (a == pooled.value[f] && !earlier)) {
        pooled.value[f] = a;
        pooled.window[f] = t;
      }
    }

  Result r;
  r.logit = logit_from(prm, pooled);
  r.probability = sigmoid(r.logit);
  r.loss = softplus(r.logit);
  r.gradient.assign(free.size(), Embedding{});

  auto add_window = [&](std::size_t f, std::size_t t, double g) {
    for (std::size_t k = 0; k < kWindow; ++k) {
      const std::size_t pos = t * kWindow + k;
      if (pos < begin_ || pos >= end_) continue;
      for (std::size_t d = 0; d < kEmbedDim; ++d) r.gradient[pos - begin_][d] += g * prm.filter(f, k, d);
    }
  };

  for (std::size_t f = 0; f < kFilters; ++f) {
    const double g = r.probability * prm.dense[f];
    if (temperature <= 0.0) {
      const std::size_t t = pooled.window[f];
      if (t >= first_window_ && t < last_window_) add_window(f, t, g);
      continue;
    }
    // Softmax weights of the log-sum-exp relaxation; the fixed windows enter
    // through their maximum only.
    const double m = pooled.value[f];
    double z = std::isfinite(fixed_.value[f]) ? std::exp((fixed_.value[f] - m) / temperature) : 0.0;
    for (std::size_t i = 0; i < span; ++i) z += std::exp((act[i * kFilters + f] - m) / temperature);
    for (std::size_t i = 0; i < span; ++i)
      add_window(f, first_window_ + i, g * std::exp((act[i * kFilters + f] - m) / temperature) / z);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training

ByteModelParams initial_byte_params(const ByteModelConfig& cfg) {
  ByteModelParams p;
  p.truncation = cfg.truncation;
  Rng rng(derive_seed(cfg.seed, {hash_tag("byte-model-init")}));
  for (auto& e : p.embedding) e = cfg.embed_init_scale * normal(rng);
  const double scale = 1.0 / std::sqrt(static_cast<double>(kWindow * kEmbedDim));
  for (auto& w : p.filters) w = scale * normal(rng);
  return p;
}

namespace {

struct Adam {
  std::vector<double> m, v;
  std::size_t step = 0;
  explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  void update(std::span<double> params, std::span<const double> grad, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * grad[i];
      v[i] = b2 * v[i] + (1 - b2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

constexpr std::size_t kEmbedCount = kVocab * kEmbedDim;
constexpr std::size_t kFilterCount = kFilters * kWindow * kEmbedDim;
constexpr std::size_t kParamCount = kEmbedCount + kFilterCount + kFilters + 1;

std::vector<double> flatten(const ByteModelParams& p) {
  std::vector<double> out;
  out.reserve(kParamCount);
  out.insert(out.end(), p.embedding.begin(), p.embedding.end());
  out.insert(out.end(), p.filters.begin(), p.filters.end());
  out.insert(out.end(), p.dense.begin(), p.dense.end());
  out.push_back(p.dense_bias);
  return out;
}

void unflatten(std::span<const double> flat, ByteModelParams& p) {
  std::copy_n(flat.begin(), kEmbedCount, p.embedding.begin());
  std::copy_n(flat.begin() + kEmbedCount, kFilterCount, p.filters.begin());
  std::copy_n(flat.begin() + kEmbedCount + kFilterCount, kFilters, p.dense.begin());
  p.dense_bias = flat[kParamCount - 1];
}

}  // namespace

ByteEmbedModel train_byte_model(std::span<const TrainingExample> examples, const ByteModelConfig& cfg,
                                TrainReport* report) {
  std::size_t pos = 0;
  for (const auto& e : examples) pos += e.malicious;
  if (pos == 0 || pos == examples.size()) throw Error(ErrorCode::DegenerateCorpus, "training data contains a single class");

  const DataSplit split = split_examples(examples.size(), cfg.seed);
  ByteModelParams params = initial_byte_params(cfg);
  std::vector<double> flat = flatten(params);
  Adam adam(kParamCount);
  Rng rng(derive_seed(cfg.seed, {hash_tag("byte-model-order")}));
  std::vector<std::size_t> order = split.train;
  std::vector<double> grad(kParamCount);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const ByteEmbedModel model(params);
      std::fill(grad.begin(), grad.end(), 0.0);
      double* g_embed = grad.data();
      double* g_filter = grad.data() + kEmbedCount;
      double* g_dense = grad.data() + kEmbedCount + kFilterCount;
      double& g_bias = grad[kParamCount - 1];
      for (std::size_t b = start; b < stop; ++b) {
        const auto& ex = examples[order[b]];
        const Pooled pooled = model.pool(ex.bytes);
        const double p = sigmoid(logit_from(params, pooled));
        const double g = p - (ex.malicious ? 1.0 : 0.0);
        g_bias += g;
        for (std::size_t f = 0; f < kFilters; ++f) {
          g_dense[f] += g * pooled.value[f];
          const double gf = g * params.dense[f];
          if (gf == 0.0) continue;
          const std::size_t t = pooled.window[f];
          for (std::size_t k = 0; k < kWindow; ++k) {
            const std::uint16_t tok = model.token_at(ex.bytes, t * kWindow + k);
            for (std::size_t d = 0; d < kEmbedDim; ++d) {
              g_filter[(f * kWindow + k) * kEmbedDim + d] += gf * params.embed(tok, d);
              g_embed[tok * kEmbedDim + d] += gf * params.filter(f, k, d);
            }
          }
        }
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (auto& x : grad) x *= inv;
      adam.update(flat, grad, cfg.learning_rate);
      unflatten(flat, params);
    }
  }

  const ByteEmbedModel trained(params);
  auto eval = [&](const std::vector<std::size_t>& part, std::vector<double>& s, std::vector<std::uint8_t>& l) {
    for (auto r : part) {
      s.push_back(trained.probability(examples[r].bytes));
      l.push_back(examples[r].malicious);
    }
  };
  std::vector<double> vs, ts;
  std::vector<std::uint8_t> vl, tl;
  eval(split.validation, vs, vl);
  eval(split.test, ts, tl);
  params.threshold = vs.empty() ? 0.5 : best_balanced_threshold(vs, vl);
  if (report) {
    report->train_size = split.train.size();
    report->validation_size = split.validation.size();
    report->test_size = split.test.size();
    report->threshold = params.threshold;
    report->validation_balanced_accuracy = balanced_accuracy_at(vs, vl, params.threshold);
    report->heldout_accuracy = accuracy_at(ts, tl, params.threshold);
  }
  return ByteEmbedModel(std::move(params));
}

json to_json(const ByteEmbedModel& model) {
  const auto& p = model.params();
  std::vector<double> dense(p.dense.begin(), p.dense.end());
  dense.push_back(p.dense_bias);
  const double threshold[] = {p.threshold};
  return {{"format", "chainae-model"},
          {"version", 1},
          {"kind", "byte-embed"},
          {"vocab", kVocab},
          {"embed_dim", kEmbedDim},
          {"filters", kFilters},
          {"window", kWindow},
          {"truncation", p.truncation},
          {"embedding", encode_f64(p.embedding)},
          {"conv", encode_f64(p.filters)},
          {"dense", encode_f64(dense)},
          {"threshold", encode_f64(threshold)}};
}

ByteEmbedModel byte_model_from_json(const json& doc) {
  if (doc.value("format", "") != "chainae-model" || doc.value("version", 0) != 1 || doc.value("kind", "") != "byte-embed")
    throw Error(ErrorCode::UnsupportedVersion, "not a version-1 byte-embed document");
  if (doc.value("vocab", 0u) != kVocab || doc.value("embed_dim", 0u) != kEmbedDim ||
      doc.value("filters", 0u) != kFilters || doc.value("window", 0u) != kWindow)
    throw Error(ErrorCode::UnsupportedVersion, "byte model architecture mismatch");
  ByteModelParams p;
  p.truncation = doc.at("truncation").get<std::size_t>();
  p.embedding = decode_f64(doc.at("embedding").get<std::string>());
  p.filters = decode_f64(doc.at("conv").get<std::string>());
  const auto dense = decode_f64(doc.at("dense").get<std::string>());
  const auto threshold = decode_f64(doc.at("threshold").get<std::string>());
  if (dense.size() != kFilters + 1 || threshold.size() != 1)
    throw Error(ErrorCode::ProtocolError, "byte model dense/threshold shape mismatch");
  std::copy_n(dense.begin(), kFilters, p.dense.begin());
  p.dense_bias = dense[kFilters];
  p.threshold = threshold[0];
  return ByteEmbedModel(std::move(p));
}

}  // namespace chainae::detectors
