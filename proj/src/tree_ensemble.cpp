#include "chainae/tree_ensemble.hpp"

#include <algorithm>
#include <cmath>

namespace chainae::detectors {

using features::FeatureVector;
using features::kFeatureCount;
using nlohmann::json;

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Candidate split values per feature and the bin index of every training
/// value. Bin b collects x with thresholds[b-1] < x <= thresholds[b].
struct Binned {
  std::vector<std::vector<double>> thresholds;  // per feature
  std::vector<std::uint8_t> bins;               // row-major n x kFeatureCount
};

Binned bin_features(std::span<const FeatureVector> x, std::span<const std::size_t> rows, std::size_t max_bins) {
  Binned b;
  b.thresholds.resize(kFeatureCount);
  std::vector<double> col(rows.size());
  for (std::size_t f = 0; f < kFeatureCount; ++f) {
    for (std::size_t i = 0; i < rows.size(); ++i) col[i] = x[rows[i]][f];
    std::sort(col.begin(), col.end());
    std::vector<double> uniq = col;
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    auto& t = b.thresholds[f];
    if (uniq.size() <= max_bins) {
      t.assign(uniq.begin(), uniq.end());
    } else {
      for (std::size_t k = 1; k < max_bins; ++k) t.push_back(col[k * col.size() / max_bins]);
      t.push_back(col.back());
      t.erase(std::unique(t.begin(), t.end()), t.end());
    }
    // The last threshold would send everything left; it is never a useful split
    // but keeps bin lookups in range.
  }
  b.bins.resize(rows.size() * kFeatureCount);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t f = 0; f < kFeatureCount; ++f) {
      const auto& t = b.thresholds[f];
      auto it = std::lower_bound(t.begin(), t.end(), x[rows[i]][f]);
      b.bins[i * kFeatureCount + f] = static_cast<std::uint8_t>(std::min<std::size_t>(it - t.begin(), t.size() - 1));
    }
  return b;
}

struct SplitChoice {
  double gain = 0.0;
  std::int32_t feature = -1;
  std::size_t bin = 0;
};

class TreeBuilder {
 public:
  TreeBuilder(const Binned& binned, std::span<const double> grad, std::span<const double> hess, const TreeConfig& cfg)
      : binned_(binned), grad_(grad), hess_(hess), cfg_(cfg) {}

  RegressionTree build(std::size_t n) {
    RegressionTree tree;
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    grow(tree, rows, 0);
    return tree;
  }

 private:
  std::int32_t grow(RegressionTree& tree, const std::vector<std::size_t>& rows, std::size_t depth) {
    const auto id = static_cast<std::int32_t>(tree.nodes.size());
    tree.nodes.emplace_back();
    double g = 0.0, h = 0.0;
    for (auto r : rows) {
      g += grad_[r];
      h += hess_[r];
    }
    SplitChoice best;
    if (depth < cfg_.max_depth && rows.size() >= 2) best = find_split(rows, g, h);
    if (best.feature < 0) {
      tree.nodes[id].value = -g / (h + cfg_.l2);
      return id;
    }
    std::vector<std::size_t> left, right;
    for (auto r : rows)
      (binned_.bins[r * kFeatureCount + best.feature] <= best.bin ? left : right).push_back(r);
    const std::int32_t l = grow(tree, left, depth + 1);
    const std::int32_t rr = grow(tree, right, depth + 1);
    auto& node = tree.nodes[id];
    node.feature = best.feature;
    node.split = binned_.thresholds[best.feature][best.bin];
    node.left = l;
    node.right = rr;
    return id;
  }

  SplitChoice find_split(const std::vector<std::size_t>& rows, double g, double h) const {
    const double parent = g * g / (h + cfg_.l2);
    SplitChoice best;
    std::vector<double> hg(256), hh(256);
    for (std::size_t f = 0; f < kFeatureCount; ++f) {
      const std::size_t nb = binned_.thresholds[f].size();
      if (nb < 2) continue;
      std::fill(hg.begin(), hg.begin() + static_cast<std::ptrdiff_t>(nb), 0.0);
      std::fill(hh.begin(), hh.begin() + static_cast<std::ptrdiff_t>(nb), 0.0);
      for (auto r : rows) {
        const auto b = binned_.bins[r * kFeatureCount + f];
        hg[b] += grad_[r];
        hh[b] += hess_[r];
      }
      double gl = 0.0, hl = 0.0;
      for (std::size_t b = 0; b + 1 < nb; ++b) {
        gl += hg[b];
        hl += hh[b];
        const double gr = g - gl, hr = h - hl;
        if (hl < cfg_.min_child_hessian || hr < cfg_.min_child_hessian) continue;
        const double gain = gl * gl / (hl + cfg_.l2) + gr * gr / (hr + cfg_.l2) - parent;
        if (gain > best.gain + 1e-12) best = {gain, static_cast<std::int32_t>(f), b};
      }
    }
    return best;
  }

  const Binned& binned_;
  std::span<const double> grad_;
  std::span<const double> hess_;
  const TreeConfig& cfg_;
};

}  // namespace

double RegressionTree::predict(const FeatureVector& x) const {
  std::int32_t i = 0;
  while (nodes[i].feature >= 0) i = x[nodes[i].feature] <= nodes[i].split ? nodes[i].left : nodes[i].right;
  return nodes[i].value;
}

double TreeEnsembleModel::margin(const FeatureVector& x) const {
  double sum = 0.0;
  for (const auto& t : trees) sum += t.predict(x);
  return base_score + learning_rate * sum;
}

double TreeEnsembleModel::probability(const FeatureVector& x) const { return sigmoid(margin(x)); }

TreeEnsembleModel train_tree_ensemble(std::span<const FeatureVector> x, std::span<const std::uint8_t> y, const TreeConfig& cfg,
                                      TrainReport* report) {
  const std::size_t pos = static_cast<std::size_t>(std::count(y.begin(), y.end(), std::uint8_t{1}));
  if (pos == 0 || pos == y.size()) throw Error(ErrorCode::DegenerateCorpus, "training data contains a single class");

  const DataSplit split = split_examples(x.size(), cfg.seed);
  const auto& rows = split.train;
  std::size_t train_pos = 0;
  for (auto r : rows) train_pos += y[r];
  if (train_pos == 0 || train_pos == rows.size())
    throw Error(ErrorCode::DegenerateCorpus, "training partition contains a single class");

  TreeEnsembleModel model;
  model.learning_rate = cfg.learning_rate;
  model.base_score = std::log(static_cast<double>(train_pos) / static_cast<double>(rows.size() - train_pos));

  const Binned binned = bin_features(x, rows, std::min<std::size_t>(cfg.max_bins, 256));
  std::vector<double> raw(rows.size(), model.base_score), grad(rows.size()), hess(rows.size());
  for (std::size_t round = 0; round < cfg.rounds; ++round) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double p = sigmoid(raw[i]);
      grad[i] = p - (y[rows[i]] ? 1.0 : 0.0);
      hess[i] = std::max(p * (1.0 - p), 1e-12);
    }
    TreeBuilder builder(binned, grad, hess, cfg);
    RegressionTree tree = builder.build(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) raw[i] += cfg.learning_rate * tree.predict(x[rows[i]]);
    model.trees.push_back(std::move(tree));
  }

  auto eval = [&](const std::vector<std::size_t>& part, std::vector<double>& s, std::vector<std::uint8_t>& l) {
    for (auto r : part) {
      s.push_back(model.probability(x[r]));
      l.push_back(y[r]);
    }
  };
  std::vector<double> vs, ts;
  std::vector<std::uint8_t> vl, tl;
  eval(split.validation, vs, vl);
  eval(split.test, ts, tl);
  model.threshold = vs.empty() ? 0.5 : best_balanced_threshold(vs, vl);
  if (report) {
    report->train_size = rows.size();
    report->validation_size = split.validation.size();
    report->test_size = split.test.size();
    report->threshold = model.threshold;
    report->validation_balanced_accuracy = balanced_accuracy_at(vs, vl, model.threshold);
    report->heldout_accuracy = accuracy_at(ts, tl, model.threshold);
  }
  return model;
}

TreeEnsembleModel train_tree_ensemble(std::span<const TrainingExample> examples, const TreeConfig& cfg,
                                      TrainReport* report) {
  std::vector<FeatureVector> x(examples.size());
  std::vector<std::uint8_t> y(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    x[i] = features::extract(examples[i].bytes);
    y[i] = examples[i].malicious;
  }
  return train_tree_ensemble(x, y, cfg, report);
}

json to_json(const TreeEnsembleModel& model) {
  json trees = json::array();
  for (const auto& t : model.trees) {
    std::vector<std::int32_t> feature, left, right;
    std::vector<double> split, value;
    for (const auto& n : t.nodes) {
      feature.push_back(n.feature);
      left.push_back(n.left);
      right.push_back(n.right);
      split.push_back(n.split);
      value.push_back(n.value);
    }
    trees.push_back({{"feature", feature}, {"left", left}, {"right", right},
                     {"split", encode_f64(split)}, {"value", encode_f64(value)}});
  }
  const double params[] = {model.learning_rate, model.base_score, model.threshold};
  return {{"format", "chainae-model"},
          {"version", 1},
          {"kind", "tree-ensemble"},
          {"feature_count", kFeatureCount},
          {"params", encode_f64(params)},
          {"trees", std::move(trees)}};
}

TreeEnsembleModel tree_ensemble_from_json(const json& doc) {
  if (doc.value("format", "") != "chainae-model" || doc.value("version", 0) != 1 ||
      doc.value("kind", "") != "tree-ensemble")
    throw Error(ErrorCode::UnsupportedVersion, "not a version-1 tree-ensemble document");
  if (doc.value("feature_count", std::size_t{0}) != kFeatureCount)
    throw Error(ErrorCode::UnsupportedVersion, "feature count mismatch");
  TreeEnsembleModel m;
  const auto params = decode_f64(doc.at("params").get<std::string>());
  if (params.size() != 3) throw Error(ErrorCode::ProtocolError, "tree-ensemble params must hold 3 values");
  m.learning_rate = params[0];
  m.base_score = params[1];
  m.threshold = params[2];
  for (const auto& jt : doc.at("trees")) {
    const auto feature = jt.at("feature").get<std::vector<std::int32_t>>();
    const auto left = jt.at("left").get<std::vector<std::int32_t>>();
    const auto right = jt.at("right").get<std::vector<std::int32_t>>();
    const auto split = decode_f64(jt.at("split").get<std::string>());
    const auto value = decode_f64(jt.at("value").get<std::string>());
    const std::size_t n = feature.size();
    if (n == 0 || left.size() != n || right.size() != n || split.size() != n || value.size() != n)
      throw Error(ErrorCode::ProtocolError, "inconsistent tree arrays");
    RegressionTree t;
    for (std::size_t i = 0; i < n; ++i) {
      const bool leaf = feature[i] < 0;
      if (!leaf && (feature[i] >= static_cast<std::int32_t>(kFeatureCount) || left[i] <= static_cast<std::int32_t>(i) ||
                    right[i] <= static_cast<std::int32_t>(i) || left[i] >= static_cast<std::int32_t>(n) ||
                    right[i] >= static_cast<std::int32_t>(n)))
        throw Error(ErrorCode::ProtocolError, "invalid tree node");
      t.nodes.push_back({feature[i], split[i], left[i], right[i], value[i]});
    }
    m.trees.push_back(std::move(t));
  }
  return m;
}

Verdict TreeEnsembleDetector::score(ByteView bytes) const {
  return make_verdict(model_.probability(features::extract(bytes)), model_.threshold, id_);
}

}  // namespace chainae::detectors
