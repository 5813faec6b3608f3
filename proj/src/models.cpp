#include "chainae/models.hpp"

#include <filesystem>
#include <fstream>

#include "chainae/parallel.hpp"

namespace chainae::models {

using namespace detectors;
using nlohmann::json;
namespace fs = std::filesystem;

SuiteConfig::SuiteConfig() {
  tree_a.seed = 7;
  byte_a.seed = 11;
  tree_b.seed = 17;
  byte_b.seed = 21;
}

namespace {

template <typename T>
void take(const json& doc, const char* key, T& field) {
  if (doc.contains(key)) field = doc.at(key).get<T>();
}

void reject_unknown(const json& doc, std::initializer_list<const char*> known, const std::string& where) {
  if (!doc.is_object()) throw Error(ErrorCode::ConfigError, where + " must be an object");
  for (const auto& [key, value] : doc.items()) {
    bool ok = false;
    for (const char* k : known) ok |= key == k;
    if (!ok) throw Error(ErrorCode::ConfigError, "unknown key '" + key + "' in " + where);
  }
}

json tree_json(const TreeConfig& c) {
  return {{"rounds", c.rounds}, {"max_depth", c.max_depth}, {"learning_rate", c.learning_rate}, {"l2", c.l2},
          {"min_child_hessian", c.min_child_hessian}, {"max_bins", c.max_bins}, {"seed", c.seed}};
}

TreeConfig tree_from(const json& doc, TreeConfig c, const std::string& where) {
  reject_unknown(doc, {"rounds", "max_depth", "learning_rate", "l2", "min_child_hessian", "max_bins", "seed"}, where);
  take(doc, "rounds", c.rounds);
  take(doc, "max_depth", c.max_depth);
  take(doc, "learning_rate", c.learning_rate);
  take(doc, "l2", c.l2);
  take(doc, "min_child_hessian", c.min_child_hessian);
  take(doc, "max_bins", c.max_bins);
  take(doc, "seed", c.seed);
  return c;
}

json byte_json(const ByteModelConfig& c) {
  return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"embed_init_scale", c.embed_init_scale}, {"truncation", c.truncation}, {"seed", c.seed}};
}

ByteModelConfig byte_from(const json& doc, ByteModelConfig c, const std::string& where) {
  reject_unknown(doc, {"epochs", "batch_size", "learning_rate", "embed_init_scale", "truncation", "seed"}, where);
  take(doc, "epochs", c.epochs);
  take(doc, "batch_size", c.batch_size);
  take(doc, "learning_rate", c.learning_rate);
  take(doc, "embed_init_scale", c.embed_init_scale);
  take(doc, "truncation", c.truncation);
  take(doc, "seed", c.seed);
  if (c.batch_size == 0 || c.truncation == 0) throw Error(ErrorCode::ConfigError, where + ": zero batch or truncation");
  return c;
}

json policy_json(const generators::PolicyConfig& c) {
  return {{"episodes", c.episodes},
          {"max_actions", c.max_actions},
          {"learning_rate", c.learning_rate},
          {"entropy_bonus", c.entropy_bonus},
          {"baseline_decay", c.baseline_decay},
          {"action_cost", c.action_cost},
          {"evasion_reward", c.evasion_reward},
          {"size_cap_factor", c.size_cap_factor},
          {"seed", c.seed}};
}

generators::PolicyConfig policy_from(const json& doc, generators::PolicyConfig c) {
  reject_unknown(doc, {"episodes", "max_actions", "learning_rate", "entropy_bonus", "baseline_decay", "action_cost", "evasion_reward",
                       "size_cap_factor", "seed"},
                 "policy config");
  take(doc, "episodes", c.episodes);
  take(doc, "max_actions", c.max_actions);
  take(doc, "learning_rate", c.learning_rate);
  take(doc, "entropy_bonus", c.entropy_bonus);
  take(doc, "baseline_decay", c.baseline_decay);
  take(doc, "action_cost", c.action_cost);
  take(doc, "evasion_reward", c.evasion_reward);
  take(doc, "size_cap_factor", c.size_cap_factor);
  take(doc, "seed", c.seed);
  return c;
}

std::vector<TrainingExample> examples_of(const corpus::Corpus& c, corpus::Split split) {
  std::vector<TrainingExample> out;
  for (const auto* s : c.select(split)) out.push_back({s->bytes, s->label == corpus::Label::Malicious});
  return out;
}

json read_json(const fs::path& p) {
  if (!fs::exists(p)) throw Error(ErrorCode::MissingArtifacts, "missing " + p.string());
  std::ifstream in(p);
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw Error(ErrorCode::ProtocolError, "unreadable JSON in " + p.string());
  return doc;
}

void write_json(const fs::path& p, const json& doc) {
  std::ofstream out(p);
  out << doc.dump(1) << '\n';
  if (!out) throw Error(ErrorCode::MissingFile, "cannot write " + p.string());
}

json ensemble_json(const AverageDetector& d) {
  std::vector<std::string> members;
  for (const auto& m : d.members()) members.push_back(m->id());
  const double threshold[] = {d.threshold()};
  return {{"format", "chainae-model"}, {"version", 1},  {"kind", "average"},
          {"id", d.id()},              {"members", members}, {"threshold", encode_f64(threshold)}};
}

}  // namespace

json to_json(const SuiteConfig& c) {
  return {{"tree_a", tree_json(c.tree_a)},
          {"byte_a", byte_json(c.byte_a)},
          {"tree_b", tree_json(c.tree_b)},
          {"byte_b", byte_json(c.byte_b)},
          {"policy", policy_json(c.policy)}};
}

SuiteConfig suite_config_from_json(const json& doc) {
  SuiteConfig c;
  reject_unknown(doc, {"tree_a", "byte_a", "tree_b", "byte_b", "policy"}, "detectors config");
  try {
    if (doc.contains("tree_a")) c.tree_a = tree_from(doc["tree_a"], c.tree_a, "tree_a");
    if (doc.contains("byte_a")) c.byte_a = byte_from(doc["byte_a"], c.byte_a, "byte_a");
    if (doc.contains("tree_b")) c.tree_b = tree_from(doc["tree_b"], c.tree_b, "tree_b");
    if (doc.contains("byte_b")) c.byte_b = byte_from(doc["byte_b"], c.byte_b, "byte_b");
    if (doc.contains("policy")) c.policy = policy_from(doc["policy"], c.policy);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("detectors config: ") + e.what());
  }
  return c;
}

json to_json(const TrainReport& r) {
  return {{"train_size", r.train_size},
          {"validation_size", r.validation_size},
          {"test_size", r.test_size},
          {"threshold", r.threshold},
          {"validation_balanced_accuracy", r.validation_balanced_accuracy},
          {"heldout_accuracy", r.heldout_accuracy}};
}

std::vector<DetectorPtr> Suite::detectors() const { return {tree_a, byte_a, tree_b, byte_b, ensemble_b}; }

DetectorPtr Suite::find(const std::string& id) const {
  for (auto& d : detectors())
    if (d && d->id() == id) return d;
  throw Error(ErrorCode::ConfigError, "unknown detector '" + id + "'");
}

Suite train_suite(const corpus::Corpus& corpus, const SuiteConfig& config, std::size_t jobs) {
  const auto ex_a = examples_of(corpus, corpus::Split::DetectorA);
  const auto ex_b = examples_of(corpus, corpus::Split::DetectorB);
  const auto ex_p = examples_of(corpus, corpus::Split::Policy);

  Suite s;
  TrainReport reports[4];
  parallel_for(4, jobs, [&](std::size_t i) {
    switch (i) {
      case 0:
        s.tree_a = std::make_shared<TreeEnsembleDetector>(kTreeA, train_tree_ensemble(ex_a, config.tree_a, &reports[0]));
        break;
      case 1:
        s.byte_a = std::make_shared<ByteModelDetector>(kByteA, train_byte_model(ex_a, config.byte_a, &reports[1]));
        break;
      case 2:
        s.tree_b = std::make_shared<TreeEnsembleDetector>(kTreeB, train_tree_ensemble(ex_b, config.tree_b, &reports[2]));
        break;
      default:
        s.byte_b = std::make_shared<ByteModelDetector>(kByteB, train_byte_model(ex_b, config.byte_b, &reports[3]));
    }
  });
  s.reports[kTreeA] = reports[0];
  s.reports[kByteA] = reports[1];
  s.reports[kTreeB] = reports[2];
  s.reports[kByteB] = reports[3];

  auto ensemble = std::make_shared<AverageDetector>(kEnsembleB, std::vector<DetectorPtr>{s.tree_b, s.byte_b}, 0.5);
  if (!ex_p.empty()) {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    for (const auto& e : ex_p) {
      scores.push_back(ensemble->mean_score(e.bytes));
      labels.push_back(e.malicious);
    }
    ensemble->set_threshold(best_balanced_threshold(scores, labels));
    s.ensemble_calibration_balanced_accuracy = balanced_accuracy_at(scores, labels, ensemble->threshold());
  }
  s.ensemble_b = ensemble;

  std::vector<ByteView> policy_samples;
  for (const auto* p : corpus.select(corpus::Split::Policy, corpus::Label::Malicious)) policy_samples.emplace_back(p->bytes);
  if (policy_samples.empty()) {
    s.policy = std::make_shared<generators::Policy>();
  } else {
    s.policy = std::make_shared<generators::Policy>(
        generators::train_policy(policy_samples, *s.tree_a, config.policy, &s.policy_stats));
  }
  return s;
}

json train_report_json(const Suite& s) {
  json models = json::object();
  for (const auto& [id, r] : s.reports) models[id] = to_json(r);
  return {{"models", std::move(models)},
          {"ensemble", {{"id", kEnsembleB},
                        {"threshold", s.ensemble_b ? s.ensemble_b->threshold() : 0.5},
                        {"calibration_balanced_accuracy", s.ensemble_calibration_balanced_accuracy}}},
          {"policy",
           {{"episodes", s.policy_stats.episodes},
            {"evasions", s.policy_stats.evasions},
            {"final_baseline", s.policy_stats.final_baseline}}}};
}

void save_suite(const Suite& s, const std::string& dir) {
  fs::create_directories(dir);
  const fs::path d(dir);
  write_json(d / "tree-A.json", to_json(s.tree_a->model()));
  write_json(d / "byte-A.json", to_json(s.byte_a->model()));
  write_json(d / "tree-B.json", to_json(s.tree_b->model()));
  write_json(d / "byte-B.json", to_json(s.byte_b->model()));
  write_json(d / "ensemble-B.json", ensemble_json(*s.ensemble_b));
  write_json(d / "policy.json", generators::to_json(*s.policy));
  write_json(d / "train_report.json", train_report_json(s));
}

Suite load_suite(const std::string& dir) {
  const fs::path d(dir);
  Suite s;
  s.tree_a = std::make_shared<TreeEnsembleDetector>(kTreeA, tree_ensemble_from_json(read_json(d / "tree-A.json")));
  s.byte_a = std::make_shared<ByteModelDetector>(kByteA, byte_model_from_json(read_json(d / "byte-A.json")));
  s.tree_b = std::make_shared<TreeEnsembleDetector>(kTreeB, tree_ensemble_from_json(read_json(d / "tree-B.json")));
  s.byte_b = std::make_shared<ByteModelDetector>(kByteB, byte_model_from_json(read_json(d / "byte-B.json")));

  const json e = read_json(d / "ensemble-B.json");
  if (e.value("format", "") != "chainae-model" || e.value("version", 0) != 1 || e.value("kind", "") != "average")
    throw Error(ErrorCode::UnsupportedVersion, "not a version-1 average document");
  const auto threshold = decode_f64(e.at("threshold").get<std::string>());
  if (threshold.size() != 1) throw Error(ErrorCode::ProtocolError, "ensemble threshold shape mismatch");
  std::vector<DetectorPtr> members;
  for (const auto& id : e.at("members")) {
    const std::string m = id.get<std::string>();
    if (m == kTreeB) members.push_back(s.tree_b);
    else if (m == kByteB) members.push_back(s.byte_b);
    else if (m == kTreeA) members.push_back(s.tree_a);
    else if (m == kByteA) members.push_back(s.byte_a);
    else throw Error(ErrorCode::ProtocolError, "unknown ensemble member '" + m + "'");
  }
  s.ensemble_b = std::make_shared<AverageDetector>(e.at("id").get<std::string>(), std::move(members), threshold[0]);
  s.policy = std::make_shared<generators::Policy>(generators::policy_from_json(read_json(d / "policy.json")));

  if (fs::exists(d / "train_report.json")) {
    const json r = read_json(d / "train_report.json");
    const json entries = r.value("models", json::object());
    for (const auto& [id, m] : entries.items()) {
      TrainReport t;
      t.train_size = m.value("train_size", std::size_t{0});
      t.validation_size = m.value("validation_size", std::size_t{0});
      t.test_size = m.value("test_size", std::size_t{0});
      t.threshold = m.value("threshold", 0.5);
      t.validation_balanced_accuracy = m.value("validation_balanced_accuracy", 0.0);
      t.heldout_accuracy = m.value("heldout_accuracy", 0.0);
      s.reports[id] = t;
    }
  }
  return s;
}

}  // namespace chainae::models
