#include "chainae/generators.hpp"

#include <chrono>
#include <cmath>

#include "chainae/features.hpp"
#include "chainae/pe.hpp"

namespace chainae::generators {

using detectors::Detector;
using nlohmann::json;
using transforms::Action;
using transforms::ActionKind;

std::string_view to_string(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::Random: return "random";
    case GeneratorKind::TrainedPolicy: return "policy";
    case GeneratorKind::Mab: return "mab";
    case GeneratorKind::Fgsm: return "fgsm";
    case GeneratorKind::PartialDos: return "partial-dos";
  }
  return "random";
}

GeneratorKind generator_kind_from_string(std::string_view s) {
  for (auto k : kAllGeneratorKinds)
    if (to_string(k) == s) return k;
  throw Error(ErrorCode::ConfigError, "unknown generator kind '" + std::string(s) + "'");
}

std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::Completed: return "completed";
    case RunStatus::Skipped: return "skipped";
    case RunStatus::Failed: return "failed";
  }
  return "failed";
}

void GeneratorConfig::validate() const {
  auto positive = [&](std::size_t v, const char* what) {
    if (v == 0) throw Error(ErrorCode::ConfigError, std::string(what) + " must be positive");
  };
  positive(max_actions, "max_actions");
  positive(actions_per_episode, "actions_per_episode");
  positive(episodes, "episodes");
  positive(iterations, "iterations");
  positive(rounds, "rounds");
  positive(payload_size, "payload_size");
  if (payload_size > kMaxPayloadSize)
    throw Error(ErrorCode::ConfigError, "payload_size must be at most " + std::to_string(kMaxPayloadSize));
  if (!(epsilon >= 0.0) || !(pool_temperature >= 0.0) || !(size_cap_factor >= 1.0))
    throw Error(ErrorCode::ConfigError, "epsilon/pool_temperature must be >= 0 and size_cap_factor >= 1");
}

GeneratorConfig default_config(GeneratorKind kind) {
  GeneratorConfig c;
  c.kind = kind;
  c.id = std::string(to_string(kind));
  return c;
}

json to_json(const GeneratorConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"id", c.id},
          {"max_actions", c.max_actions},
          {"actions_per_episode", c.actions_per_episode},
          {"episodes", c.episodes},
          {"iterations", c.iterations},
          {"rounds", c.rounds},
          {"payload_size", c.payload_size},
          {"epsilon", c.epsilon},
          {"pool_temperature", c.pool_temperature},
          {"size_cap_factor", c.size_cap_factor},
          {"seed", c.seed}};
}

GeneratorConfig generator_config_from_json(const json& doc) {
  if (!doc.is_object() || !doc.contains("kind"))
    throw Error(ErrorCode::ConfigError, "generator entry needs a 'kind'");
  GeneratorConfig c = default_config(generator_kind_from_string(doc.at("kind").get<std::string>()));
  try {
    for (const auto& [key, value] : doc.items()) {
      if (key == "kind") continue;
      else if (key == "id") c.id = value.get<std::string>();
      else if (key == "max_actions") c.max_actions = value.get<std::size_t>();
      else if (key == "actions_per_episode") c.actions_per_episode = value.get<std::size_t>();
      else if (key == "episodes") c.episodes = value.get<std::size_t>();
      else if (key == "iterations") c.iterations = value.get<std::size_t>();
      else if (key == "rounds") c.rounds = value.get<std::size_t>();
      else if (key == "payload_size") c.payload_size = value.get<std::size_t>();
      else if (key == "epsilon") c.epsilon = value.get<double>();
      else if (key == "pool_temperature") c.pool_temperature = value.get<double>();
      else if (key == "size_cap_factor") c.size_cap_factor = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw Error(ErrorCode::ConfigError, "unknown generator field '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("generator config: ") + e.what());
  }
  if (c.id.empty()) c.id = std::string(to_string(c.kind));
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

Generator::Generator(GeneratorConfig config, detectors::DetectorPtr target)
    : config_(std::move(config)), target_(std::move(target)) {
  if (config_.id.empty()) config_.id = std::string(to_string(config_.kind));
  if (!target_) throw Error(ErrorCode::ConfigError, "generator '" + config_.id + "' has no target");
  config_.validate();
}

std::size_t Generator::size_cap(const AttackInput& in) const {
  const std::size_t ref = in.genuine_size ? in.genuine_size : in.bytes.size();
  return static_cast<std::size_t>(config_.size_cap_factor * static_cast<double>(ref));
}

GeneratorResult Generator::run(const AttackInput& input) {
  const auto t0 = std::chrono::steady_clock::now();
  detectors::CountingDetector counter(*target_);
  GeneratorResult r = attack(input, counter);
  r.target_queries = counter.calls();
  r.trace.source_id = input.sample_id;
  r.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

namespace {

GeneratorResult unchanged(ByteView bytes, bool evasive) {
  GeneratorResult r;
  r.output.assign(bytes.begin(), bytes.end());
  r.evasive_vs_target = evasive;
  return r;
}

GeneratorResult failed(ByteView bytes, RunStatus status, std::string reason) {
  GeneratorResult r = unchanged(bytes, false);
  r.status = status;
  r.reason = std::move(reason);
  return r;
}

// Applies actions one at a time until the target says benign or `budget`
// actions were applied. `choose` picks the next kind from the current bytes.
template <typename Choose>
GeneratorResult action_loop(const AttackInput& in, const Detector& target, std::size_t budget, std::size_t cap,
                            Choose&& choose) {
  if (!target.score(in.bytes).malicious) return unchanged(in.bytes, true);
  pe::Image img;
  try {
    img = pe::parse(in.bytes);
  } catch (const Error& e) {
    return failed(in.bytes, RunStatus::Failed, e.what());
  }
  Rng rng(in.seed);
  GeneratorResult r = unchanged(in.bytes, false);
  const transforms::ApplyLimits limits{cap};
  // Inapplicable draws do not count against the budget, but are bounded.
  for (std::size_t attempts = 0; r.actions_applied < budget && attempts < 4 * budget; ++attempts) {
    const ActionKind kind = choose(r.output, rng);
    const Action action = transforms::sample_action(kind, img, rng);
    try {
      img = transforms::apply(img, action, limits);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::InapplicableAction) throw;
      continue;
    }
    r.trace.actions.push_back(action);
    ++r.actions_applied;
    r.output = pe::serialize(img);
    if (!target.score(r.output).malicious) {
      r.evasive_vs_target = true;
      break;
    }
  }
  return r;
}

}  // namespace

GeneratorResult RandomGenerator::attack(const AttackInput& in, const Detector& target) {
  return action_loop(in, target, config_.max_actions, size_cap(in), [](const Bytes&, Rng& rng) {
    return transforms::kAllActionKinds[uniform_int(rng, 0, transforms::kActionKindCount - 1)];
  });
}

PolicyGenerator::PolicyGenerator(GeneratorConfig config, detectors::DetectorPtr target, Policy policy)
    : Generator(std::move(config), std::move(target)), policy_(std::move(policy)) {}

GeneratorResult PolicyGenerator::attack(const AttackInput& in, const Detector& target) {
  return action_loop(in, target, config_.max_actions, size_cap(in), [this](const Bytes& current, Rng& rng) {
    return policy_.sample(features::extract(current), rng);
  });
}

// ---------------------------------------------------------------------------

namespace {

double sample_gamma(Rng& rng, double shape) {
  if (shape < 1.0) {
    const double u = uniform01(rng);
    return sample_gamma(rng, shape + 1.0) * std::pow(u > 0 ? u : 1e-300, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    const double x = normal(rng);
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    const double u = uniform01(rng);
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
  }
}

}  // namespace

double sample_beta(Rng& rng, double a, double b) {
  const double x = sample_gamma(rng, a);
  const double y = sample_gamma(rng, b);
  return x / (x + y);
}

ArmStats MabGenerator::arms() const {
  std::lock_guard lock(mu_);
  return arms_;
}

GeneratorResult MabGenerator::attack(const AttackInput& in, const Detector& target) {
  if (!target.score(in.bytes).malicious) return unchanged(in.bytes, true);
  pe::Image genuine;
  try {
    genuine = pe::parse(in.bytes);
  } catch (const Error& e) {
    return failed(in.bytes, RunStatus::Failed, e.what());
  }
  Rng rng(in.seed);
  const transforms::ApplyLimits limits{size_cap(in)};
  const std::size_t per_episode = config_.actions_per_episode;
  GeneratorResult r = unchanged(in.bytes, false);

  for (std::size_t ep = 0; ep < config_.episodes; ++ep) {
    const ArmStats posterior = arms();
    pe::Image img = genuine;
    transforms::ActionTrace trace;
    Bytes current(in.bytes.begin(), in.bytes.end());
    bool evaded = false;
    for (std::size_t attempts = 0; trace.actions.size() < per_episode && attempts < 3 * per_episode; ++attempts) {
      std::size_t arm = 0;
      double best = -1.0;
      for (std::size_t a = 0; a < transforms::kActionKindCount; ++a) {
        const double theta = sample_beta(rng, 1.0 + static_cast<double>(posterior.successes[a]),
                                         1.0 + static_cast<double>(posterior.failures[a]));
        if (theta > best) {
          best = theta;
          arm = a;
        }
      }
      const Action action = transforms::sample_action(transforms::kAllActionKinds[arm], img, rng);
      try {
        img = transforms::apply(img, action, limits);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::InapplicableAction) throw;
        continue;
      }
      trace.actions.push_back(action);
      current = pe::serialize(img);
      if (!target.score(current).malicious) {
        evaded = true;
        break;
      }
    }
    r.episodes = ep + 1;
    r.max_episode_actions = std::max(r.max_episode_actions, trace.actions.size());

    std::lock_guard lock(mu_);
    if (!evaded) {
      for (const auto& a : trace.actions) ++arms_.failures[static_cast<std::size_t>(a.kind)];
      r.output = std::move(current);
      r.trace = std::move(trace);
      continue;
    }

    auto still_evasive = [&](ByteView b) { return !target.score(b).malicious; };
    transforms::ActionTrace kept = transforms::minimize(in.bytes, trace, still_evasive, limits);
    // Credit arms: kept actions succeeded, dropped ones did not contribute.
    std::size_t j = 0;
    for (const auto& a : trace.actions) {
      if (j < kept.actions.size() && kept.actions[j] == a) {
        ++arms_.successes[static_cast<std::size_t>(a.kind)];
        ++j;
      } else {
        ++arms_.failures[static_cast<std::size_t>(a.kind)];
      }
    }
    r.output = transforms::replay(in.bytes, kept, limits);
    r.evasive_vs_target = !target.score(r.output).malicious;
    r.payload = {{"episode_actions", trace.actions.size()},
                 {"minimized_actions", kept.actions.size()},
                 {"episode_trace", transforms::trace_to_jsonl(trace)}};
    r.trace = std::move(kept);
    break;
  }
  return r;
}

// ---------------------------------------------------------------------------

GradientGenerator::GradientGenerator(GeneratorConfig config, detectors::DetectorPtr target)
    : Generator(std::move(config), std::move(target)),
      model_([this]() -> const detectors::ByteEmbedModel& {
        const auto* m = target_->white_box();
        if (!m) throw Error(ErrorCode::ConfigError, "generator '" + config_.id + "' needs a white-box byte model target");
        return *m;
      }()) {
  if (config_.kind != GeneratorKind::Fgsm && config_.kind != GeneratorKind::PartialDos)
    throw Error(ErrorCode::ConfigError, "gradient generator built for a non-gradient kind");
}

GeneratorResult GradientGenerator::attack(const AttackInput& in, const Detector& target) {
  if (!target.score(in.bytes).malicious) return unchanged(in.bytes, true);

  const bool fgsm = config_.kind == GeneratorKind::Fgsm;
  Rng rng(in.seed);
  Bytes work(in.bytes.begin(), in.bytes.end());
  std::size_t begin, end, budget;
  if (fgsm) {
    begin = in.bytes.size();
    end = begin + config_.payload_size;
    budget = config_.iterations;
    if (end > model_.truncation())
      return failed(in.bytes, RunStatus::Skipped,
                    std::string(to_string(ErrorCode::SkippedOutOfWindow)) + ": payload would end at " +
                        std::to_string(end) + " > truncation " + std::to_string(model_.truncation()));
    if (end > size_cap(in)) return failed(in.bytes, RunStatus::Skipped, "size cap reached");
    work.resize(end);
    for (std::size_t i = begin; i < end; ++i) work[i] = static_cast<std::uint8_t>(rng());
  } else {
    begin = kDosFirstFree;
    end = kDosEndFree;
    budget = config_.rounds;
    if (work.size() < pe::kDosHeaderSize) return failed(in.bytes, RunStatus::Failed, "input shorter than a DOS header");
  }

  const detectors::EmbeddingProbe probe(model_, work, begin, end);
  std::vector<detectors::Embedding> z(end - begin);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = model_.embedding_of(work[begin + i]);

  GeneratorResult r;
  for (std::size_t it = 1; it <= budget; ++it) {
    const auto step = probe.evaluate(z, config_.pool_temperature);
    for (std::size_t i = 0; i < z.size(); ++i) {
      for (std::size_t d = 0; d < detectors::kEmbedDim; ++d) {
        const double g = step.gradient[i][d];
        z[i][d] -= config_.epsilon * static_cast<double>((g > 0) - (g < 0));
      }
      work[begin + i] = model_.nearest_byte(z[i]);
    }
    const auto v = target.score(work);
    r.score_series.push_back(v.score);
    r.iterations = it;
    if (!v.malicious) {
      r.evasive_vs_target = true;
      break;
    }
  }
  r.payload = {{"region", {begin, end}}, {"iterations", r.iterations}};
  if (fgsm) r.payload["init"] = "uniform-random";
  r.output = std::move(work);
  return r;
}

// ---------------------------------------------------------------------------

std::unique_ptr<Generator> make_generator(const GeneratorConfig& config, detectors::DetectorPtr target,
                                          const Policy* policy) {
  switch (config.kind) {
    case GeneratorKind::Random: return std::make_unique<RandomGenerator>(config, std::move(target));
    case GeneratorKind::TrainedPolicy:
      if (!policy) throw Error(ErrorCode::ConfigError, "policy generator needs a trained policy");
      return std::make_unique<PolicyGenerator>(config, std::move(target), *policy);
    case GeneratorKind::Mab: return std::make_unique<MabGenerator>(config, std::move(target));
    case GeneratorKind::Fgsm:
    case GeneratorKind::PartialDos: return std::make_unique<GradientGenerator>(config, std::move(target));
  }
  throw Error(ErrorCode::ConfigError, "unknown generator kind");
}

}  // namespace chainae::generators
