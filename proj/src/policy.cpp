#include "chainae/policy.hpp"

#include <algorithm>
#include <cmath>

#include "chainae/pe.hpp"

namespace chainae::generators {

using features::FeatureVector;
using features::kFeatureCount;
using nlohmann::json;

Policy::Policy()
    : weights(kActionKindCount * kFeatureCount, 0.0),
      bias(kActionKindCount, 0.0),
      mean(kFeatureCount, 0.0),
      inv_scale(kFeatureCount, 1.0) {}

std::array<double, kActionKindCount> Policy::logits(const FeatureVector& x) const {
  std::array<double, kFeatureCount> z;
  for (std::size_t j = 0; j < kFeatureCount; ++j) z[j] = (x[j] - mean[j]) * inv_scale[j];
  std::array<double, kActionKindCount> out;
  for (std::size_t a = 0; a < kActionKindCount; ++a) {
    double acc = bias[a];
    const double* w = &weights[a * kFeatureCount];
    for (std::size_t j = 0; j < kFeatureCount; ++j) acc += w[j] * z[j];
    out[a] = acc;
  }
  return out;
}

std::array<double, kActionKindCount> Policy::probabilities(const FeatureVector& x) const {
  auto l = logits(x);
  const double m = *std::max_element(l.begin(), l.end());
  double sum = 0.0;
  for (auto& v : l) sum += (v = std::exp(v - m));
  for (auto& v : l) v /= sum;
  return l;
}

transforms::ActionKind Policy::sample(const FeatureVector& x, Rng& rng) const {
  const auto p = probabilities(x);
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t a = 0; a < kActionKindCount; ++a) {
    acc += p[a];
    if (u < acc) return transforms::kAllActionKinds[a];
  }
  return transforms::kAllActionKinds.back();
}

namespace {

void fit_standardization(std::span<const ByteView> samples, Policy& policy) {
  std::vector<double> sum(kFeatureCount, 0.0), sq(kFeatureCount, 0.0);
  for (auto s : samples) {
    const auto x = features::extract(s);
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
      sum[j] += x[j];
      sq[j] += x[j] * x[j];
    }
  }
  const double n = static_cast<double>(samples.size());
  for (std::size_t j = 0; j < kFeatureCount; ++j) {
    const double m = sum[j] / n;
    const double var = std::max(0.0, sq[j] / n - m * m);
    policy.mean[j] = m;
    policy.inv_scale[j] = var > 1e-12 ? 1.0 / std::sqrt(var) : 0.0;
  }
}

struct Step {
  std::array<double, kFeatureCount> z;
  std::array<double, kActionKindCount> p;
  std::size_t action;
};

}  // namespace

Policy train_policy(std::span<const ByteView> samples, const detectors::Detector& target, const PolicyConfig& cfg,
                    PolicyTrainStats* stats) {
  if (samples.empty()) throw Error(ErrorCode::DegenerateCorpus, "no policy training samples");
  Policy policy;
  if (cfg.episodes == 0) return policy;
  fit_standardization(samples, policy);

  Rng rng(derive_seed(cfg.seed, {hash_tag("policy-train")}));
  std::vector<std::size_t> order(samples.size());
  double baseline = 0.0;
  bool have_baseline = false;
  PolicyTrainStats st;

  for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
    if (ep % samples.size() == 0) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    }
    const ByteView genuine = samples[order[ep % samples.size()]];
    pe::Image img;
    try {
      img = pe::parse(genuine);
    } catch (const Error&) {
      continue;
    }
    if (!target.score(genuine).malicious) continue;

    const transforms::ApplyLimits limits{static_cast<std::size_t>(cfg.size_cap_factor * genuine.size())};
    Bytes current(genuine.begin(), genuine.end());
    std::vector<Step> steps;
    bool evaded = false;
    while (steps.size() < cfg.max_actions && !evaded) {
      const auto x = features::extract(current);
      Step step;
      for (std::size_t j = 0; j < kFeatureCount; ++j) step.z[j] = (x[j] - policy.mean[j]) * policy.inv_scale[j];
      step.p = policy.probabilities(x);
      const auto kind = policy.sample(x, rng);
      step.action = static_cast<std::size_t>(kind);
      steps.push_back(step);
      try {
        img = transforms::apply(img, transforms::sample_action(kind, img, rng), limits);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::InapplicableAction) throw;
        continue;
      }
      current = pe::serialize(img);
      evaded = !target.score(current).malicious;
    }

    const double ret = (evaded ? cfg.evasion_reward : 0.0) - cfg.action_cost * static_cast<double>(steps.size());
    if (!have_baseline) {
      baseline = ret;
      have_baseline = true;
    }
    const double advantage = ret - baseline;
    baseline = cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * ret;
    st.evasions += evaded;
    ++st.episodes;
    if (steps.empty()) continue;

    // Policy-gradient step plus an entropy bonus that keeps the softmax from
    // collapsing onto one action kind early.
    const double scale = cfg.learning_rate * advantage / static_cast<double>(steps.size());
    const double ent_scale = cfg.learning_rate * cfg.entropy_bonus / static_cast<double>(steps.size());
    for (const auto& s : steps) {
      double h = 0.0;
      for (double q : s.p) h -= q > 0.0 ? q * std::log(q) : 0.0;
      for (std::size_t a = 0; a < kActionKindCount; ++a) {
        const double dh = s.p[a] > 0.0 ? -s.p[a] * (std::log(s.p[a]) + h) : 0.0;
        const double g = scale * ((a == s.action ? 1.0 : 0.0) - s.p[a]) + ent_scale * dh;
        policy.bias[a] += g;
        double* w = &policy.weights[a * kFeatureCount];
        for (std::size_t j = 0; j < kFeatureCount; ++j) w[j] += g * s.z[j];
      }
    }
  }
  st.final_baseline = baseline;
  if (stats) *stats = st;
  return policy;
}

json to_json(const Policy& p) {
  return {{"format", "chainae-model"},
          {"version", 1},
          {"kind", "policy"},
          {"actions", kActionKindCount},
          {"features", kFeatureCount},
          {"weights", encode_f64(p.weights)},
          {"bias", encode_f64(p.bias)},
          {"mean", encode_f64(p.mean)},
          {"inv_scale", encode_f64(p.inv_scale)}};
}

Policy policy_from_json(const json& doc) {
  if (doc.value("format", "") != "chainae-model" || doc.value("version", 0) != 1 || doc.value("kind", "") != "policy")
    throw Error(ErrorCode::UnsupportedVersion, "not a version-1 policy document");
  Policy p;
  p.weights = decode_f64(doc.at("weights").get<std::string>());
  p.bias = decode_f64(doc.at("bias").get<std::string>());
  p.mean = decode_f64(doc.at("mean").get<std::string>());
  p.inv_scale = decode_f64(doc.at("inv_scale").get<std::string>());
  if (p.weights.size() != kActionKindCount * kFeatureCount || p.bias.size() != kActionKindCount ||
      p.mean.size() != kFeatureCount || p.inv_scale.size() != kFeatureCount)
    throw Error(ErrorCode::ProtocolError, "policy shape mismatch");
  return p;
}

}  // namespace chainae::generators
