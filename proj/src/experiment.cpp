#include "chainae/experiment.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

namespace chainae::experiment {

using nlohmann::json;
namespace fs = std::filesystem;
using generators::GeneratorKind;

std::vector<GeneratorEntry> default_generators() {
  std::vector<GeneratorEntry> out;
  for (auto k : generators::kAllGeneratorKinds) {
    const bool tree = k == GeneratorKind::Random || k == GeneratorKind::TrainedPolicy;
    out.push_back({generators::default_config(k), tree ? models::kTreeA : models::kByteA});
  }
  return out;
}

std::vector<OracleEntry> default_oracles() {
  return {{models::kTreeB, ""}, {models::kByteB, ""}, {models::kEnsembleB, ""}};
}

ExperimentConfig default_experiment() {
  ExperimentConfig c;
  c.generators = default_generators();
  c.oracles = default_oracles();
  return c;
}

namespace {

void check_keys(const json& doc, std::initializer_list<const char*> known, const std::string& where) {
  if (!doc.is_object()) throw Error(ErrorCode::ConfigError, where + " must be an object");
  for (const auto& [key, value] : doc.items()) {
    bool ok = false;
    for (const char* k : known) ok |= key == k;
    if (!ok) throw Error(ErrorCode::ConfigError, "unknown key '" + key + "' in " + where);
  }
}

std::string_view to_string(chain::SecondStageInput s) { return s == chain::SecondStageInput::Ae ? "ae" : "genuine"; }

std::string file_id(const std::string& id) {
  std::string out;
  for (char c : id) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return out;
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::MissingArtifacts, "missing " + p.string());
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw Error(ErrorCode::MissingArtifacts, "unreadable " + p.string());
  return doc;
}

void write_json_file(const fs::path& p, const json& doc) { artifacts::write_text(p.string(), doc.dump(1) + "\n"); }

json record_json(const chain::StageRecord& r, const std::vector<std::string>& oracle_ids) {
  json benign = json::object();
  for (std::size_t o = 0; o < oracle_ids.size(); ++o) benign[oracle_ids[o]] = static_cast<bool>(r.oracle_benign[o]);
  // elapsed_ms is left out on purpose: this file is compared across reruns.
  return {{"sample_id", r.sample_id},
          {"generator", r.generator},
          {"first_stage", r.first_stage},
          {"target", r.target},
          {"input_digest", r.input_digest},
          {"output_digest", r.output_digest},
          {"evasive_vs_target", r.evasive_vs_target},
          {"status", generators::to_string(r.status)},
          {"reason", r.reason},
          {"target_queries", r.target_queries},
          {"actions_applied", r.actions_applied},
          {"max_episode_actions", r.max_episode_actions},
          {"episodes", r.episodes},
          {"iterations", r.iterations},
          {"trace", r.trace_jsonl},
          {"payload", r.payload},
          {"oracle_benign", std::move(benign)}};
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json gens = json::array();
  for (const auto& g : c.generators) {
    json j = generators::to_json(g.config);
    j["target"] = g.target;
    gens.push_back(std::move(j));
  }
  json oracles = json::array();
  for (const auto& o : c.oracles) {
    json j = {{"detector", o.detector}};
    if (!o.remote.empty()) j["remote"] = o.remote;
    oracles.push_back(std::move(j));
  }
  json corpus = corpus::to_json(c.corpus);
  corpus.erase("seed");
  return {{"seed", c.seed},
          {"jobs", c.jobs},
          {"corpus", std::move(corpus)},
          {"detectors", models::to_json(c.detectors)},
          {"generators", std::move(gens)},
          {"oracles", std::move(oracles)},
          {"chain", {{"second_stage_input", to_string(c.second_stage_input)}, {"attack_limit", c.attack_limit}}},
          {"service",
           {{"bind", c.service.bind},
            {"rate_limit", c.service.rate_limit},
            {"burst", c.service.burst},
            {"cache_dir", c.service.cache_dir},
            {"client_retries", c.service.client_retries}}}};
}

ExperimentConfig experiment_from_json(const json& doc) {
  ExperimentConfig c = default_experiment();
  check_keys(doc, {"seed", "jobs", "out", "corpus", "detectors", "generators", "oracles", "chain", "service"},
             "experiment config");
  try {
    if (doc.contains("seed")) c.seed = doc["seed"].get<std::uint64_t>();
    if (doc.contains("jobs")) c.jobs = doc["jobs"].get<std::size_t>();
    if (doc.contains("out")) c.out = doc["out"].get<std::string>();
    if (doc.contains("corpus")) {
      check_keys(doc["corpus"],
                 {"detector_a_per_class", "detector_b_per_class", "policy_per_class", "eval_malicious", "eval_benign",
                  "min_size", "max_size"},
                 "corpus config");
      c.corpus = corpus::corpus_config_from_json(doc["corpus"]);
    }
    if (doc.contains("detectors")) c.detectors = models::suite_config_from_json(doc["detectors"]);
    if (doc.contains("generators")) {
      c.generators.clear();
      const auto defaults = default_generators();
      for (json g : doc["generators"]) {
        if (!g.is_object()) throw Error(ErrorCode::ConfigError, "generator entries must be objects");
        std::string target;
        if (g.contains("target")) {
          target = g["target"].get<std::string>();
          g.erase("target");
        }
        GeneratorEntry e{generators::generator_config_from_json(g), target};
        if (e.target.empty()) e.target = defaults[static_cast<std::size_t>(e.config.kind)].target;
        c.generators.push_back(std::move(e));
      }
    }
    if (doc.contains("oracles")) {
      c.oracles.clear();
      for (const auto& o : doc["oracles"]) {
        check_keys(o, {"detector", "remote"}, "oracle entry");
        c.oracles.push_back({o.at("detector").get<std::string>(), o.value("remote", std::string())});
      }
    }
    if (doc.contains("chain")) {
      const json& ch = doc["chain"];
      check_keys(ch, {"second_stage_input", "attack_limit"}, "chain config");
      if (ch.contains("second_stage_input")) {
        const auto s = ch["second_stage_input"].get<std::string>();
        if (s == "ae") c.second_stage_input = chain::SecondStageInput::Ae;
        else if (s == "genuine") c.second_stage_input = chain::SecondStageInput::Genuine;
        else throw Error(ErrorCode::ConfigError, "second_stage_input must be 'ae' or 'genuine'");
      }
      if (ch.contains("attack_limit")) c.attack_limit = ch["attack_limit"].get<std::size_t>();
    }
    if (doc.contains("service")) {
      const json& sv = doc["service"];
      check_keys(sv, {"bind", "rate_limit", "burst", "cache_dir", "client_retries"}, "service config");
      c.service.bind = sv.value("bind", c.service.bind);
      c.service.rate_limit = sv.value("rate_limit", c.service.rate_limit);
      c.service.burst = sv.value("burst", c.service.burst);
      c.service.cache_dir = sv.value("cache_dir", c.service.cache_dir);
      c.service.client_retries = sv.value("client_retries", c.service.client_retries);
      if (!c.service.bind.empty()) scan::parse_endpoint(c.service.bind);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("experiment config: ") + e.what());
  }
  if (c.oracles.empty()) throw Error(ErrorCode::ConfigError, "at least one oracle is required");
  for (const auto& o : c.oracles)
    if (!o.remote.empty()) scan::parse_endpoint(o.remote);
  for (std::size_t i = 0; i < c.generators.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (c.generators[i].config.id == c.generators[j].config.id)
        throw Error(ErrorCode::ConfigError, "duplicate generator id '" + c.generators[i].config.id + "'");
  if (c.jobs == 0) c.jobs = 1;
  return c;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot read config file " + path);
  const json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw Error(ErrorCode::ConfigError, path + " is not valid JSON");
  return experiment_from_json(doc);
}

// ---------------------------------------------------------------------------

Experiment::Experiment(ExperimentConfig config, Progress progress)
    : config_(std::move(config)), progress_(std::move(progress)) {
  if (config_.oracles.empty()) throw Error(ErrorCode::ConfigError, "at least one oracle is required");
  config_.corpus.seed = config_.seed;
  config_.corpus.jobs = config_.jobs;
  if (!progress_) progress_ = [](const std::string&) {};
}

std::string Experiment::path(const std::string& rel) const { return (fs::path(config_.out) / rel).string(); }

void Experiment::capture_config() const {
  fs::create_directories(config_.out);
  write_json_file(path("config.json"), to_json(config_));
}

void Experiment::log_result(const std::string& verb, json fields, double seconds) const {
  fs::create_directories(path("logs"));
  fields["verb"] = verb;
  fields["seed"] = config_.seed;
  fields["seconds"] = seconds;
  std::ofstream(path("logs/results.jsonl"), std::ios::app) << fields.dump() << '\n';
}

const corpus::Corpus& Experiment::corpus() {
  if (corpus_) return *corpus_;
  const std::string manifest = path("corpus/manifest.json");
  if (fs::exists(manifest)) {
    const json m = read_json_file(manifest);
    if (m.contains("config") && m["config"] == corpus::to_json(config_.corpus)) {
      progress_("loading corpus from " + manifest);
      corpus_ = corpus::load_corpus(manifest);
      return *corpus_;
    }
    fs::remove_all(path("corpus"));
  }
  progress_("generating corpus (seed " + std::to_string(config_.seed) + ")");
  corpus::Corpus c = corpus::generate_corpus(config_.corpus);
  corpus::write_corpus(c, path("corpus"));
  corpus_ = std::move(c);
  return *corpus_;
}

const models::Suite& Experiment::models() {
  if (models_) return *models_;
  const json stamp = {{"corpus", corpus::to_json(config_.corpus)}, {"detectors", models::to_json(config_.detectors)}};
  const std::string stamp_path = path("models/suite_config.json");
  if (fs::exists(stamp_path) && read_json_file(stamp_path) == stamp) {
    try {
      models_ = models::load_suite(path("models"));
      progress_("loaded models from " + path("models"));
      return *models_;
    } catch (const std::exception&) {
      // Incomplete or unreadable model directory: retrain below.
    }
  }
  const auto& c = corpus();
  progress_("training detectors and policy");
  models_ = models::train_suite(c, config_.detectors, config_.jobs);
  models::save_suite(*models_, path("models"));
  write_json_file(stamp_path, stamp);
  return *models_;
}

std::vector<chain::GeneratorSpec> Experiment::generator_specs() {
  std::vector<chain::GeneratorSpec> out;
  for (const auto& g : config_.generators) {
    chain::GeneratorSpec s{g.config, models().find(g.target), nullptr};
    if (g.config.kind == GeneratorKind::TrainedPolicy) s.policy = models().policy;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<detectors::DetectorPtr> Experiment::oracles() {
  std::vector<detectors::DetectorPtr> out;
  for (const auto& o : config_.oracles) {
    if (o.remote.empty()) {
      out.push_back(models().find(o.detector));
      continue;
    }
    scan::ClientConfig cc;
    cc.server = scan::parse_endpoint(o.remote);
    cc.detector = o.detector;
    cc.max_retries = config_.service.client_retries;
    out.push_back(std::make_shared<scan::RemoteDetector>(cc));
  }
  return out;
}

std::vector<chain::AttackSample> Experiment::attack_samples() {
  std::vector<chain::AttackSample> out;
  for (const auto* s : corpus().select(corpus::Split::Eval, corpus::Label::Malicious)) {
    if (config_.attack_limit && out.size() >= config_.attack_limit) break;
    out.push_back({s->id, s->bytes});
  }
  return out;
}

chain::ChainRunner Experiment::make_runner(chain::OutputHook hook) {
  chain::ChainOptions opt;
  opt.jobs = config_.jobs;
  opt.seed = config_.seed;
  opt.second_stage_input = config_.second_stage_input;
  opt.on_output = std::move(hook);
  auto specs = generator_specs();
  auto oracle_list = oracles();
  auto samples = attack_samples();
  progress_("screening " + std::to_string(samples.size()) + " samples with " + std::to_string(oracle_list.size()) +
            " oracle(s)");
  return chain::ChainRunner(std::move(samples), std::move(specs), std::move(oracle_list), opt);
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void Experiment::cmd_corpus() {
  const auto t0 = std::chrono::steady_clock::now();
  capture_config();
  const auto& c = corpus();
  log_result("corpus", {{"samples", c.samples.size()}}, seconds_since(t0));
}

json Experiment::cmd_train() {
  const auto t0 = std::chrono::steady_clock::now();
  capture_config();
  const json report = models::train_report_json(models());
  log_result("train", {{"report", report}}, seconds_since(t0));
  return report;
}

artifacts::BaselineTable Experiment::cmd_baseline() {
  const auto t0 = std::chrono::steady_clock::now();
  capture_config();
  auto runner = make_runner({});
  for (std::size_t g = 0; g < runner.generators().size(); ++g) {
    progress_("stage 1: " + runner.generators()[g].id());
    runner.stage_one(g);
  }
  const artifacts::BaselineTable t = artifacts::baseline_table(runner);
  fs::create_directories(path("baseline"));
  artifacts::write_text(path("baseline/baseline.csv"), artifacts::baseline_csv(t));
  write_json_file(path("baseline/baseline.json"), artifacts::to_json(t));
  log_result("baseline", {{"rows", t.rate.size()}}, seconds_since(t0));
  return t;
}

chain::EvasionReport Experiment::cmd_matrix(chain::OutputHook hook) {
  const auto t0 = std::chrono::steady_clock::now();
  capture_config();
  auto runner = make_runner(std::move(hook));
  const std::size_t n = runner.generators().size();
  for (std::size_t g = 0; g < n; ++g) {
    progress_("stage 1: " + runner.generators()[g].id());
    runner.stage_one(g);
  }
  for (std::size_t g1 = 0; g1 < n; ++g1)
    for (std::size_t g2 = 0; g2 < n; ++g2) {
      progress_("stage 2: " + runner.generators()[g1].id() + " -> " + runner.generators()[g2].id());
      runner.stage_two(g1, g2);
    }
  const chain::EvasionReport report = runner.pair_matrix();

  const std::string dir = path("matrix");
  fs::create_directories(dir);
  auto emit = [&](const std::string& name, const std::string& title, const std::vector<std::optional<double>>& values,
                  const artifacts::HeatScale& scale) {
    artifacts::write_text(dir + "/" + name + ".csv", artifacts::matrix_csv(report.generators, values));
    artifacts::write_text(dir + "/" + name + ".svg", artifacts::heatmap_svg(title, report.generators, values, scale));
  };
  auto rel_scale = [](const std::vector<std::optional<double>>& v) {
    double hi = 0.0;
    for (const auto& x : v)
      if (x) hi = std::max(hi, *x);
    return artifacts::HeatScale{0.0, hi > 0.0 ? hi : 1.0};
  };
  for (const auto& o : report.oracles) {
    std::vector<std::optional<double>> abs, rel;
    for (const auto& c : o.cells) {
      abs.emplace_back(c.rate);
      rel.push_back(c.relative);
    }
    emit(file_id(o.oracle), "Evasion rate (%) vs " + o.oracle, abs, {0.0, 100.0});
    emit(file_id(o.oracle) + "_relative", "Relative increase (%) over single pass vs " + o.oracle, rel, rel_scale(rel));
  }
  std::vector<std::optional<double>> avg(report.averaged.begin(), report.averaged.end());
  emit("averaged", "Evasion rate (%) averaged over oracles", avg, {0.0, 100.0});
  emit("averaged_relative", "Relative increase (%) averaged over oracles", report.averaged_relative,
       rel_scale(report.averaged_relative));
  artifacts::write_text(dir + "/stats.csv", artifacts::stats_csv(report));
  artifacts::write_text(dir + "/cells.csv", artifacts::cells_csv(report));

  json screening = json::array();
  for (std::size_t o = 0; o < runner.oracle_count(); ++o)
    screening.push_back({{"oracle", config_.oracles[o].detector},
                         {"kept", runner.screening(o).kept.size()},
                         {"screened_out", runner.screening(o).screened_out}});
  write_json_file(dir + "/matrix.json", {{"config", to_json(config_)},
                                         {"samples", runner.screening(0).kept.size() + runner.screening(0).screened_out.size()},
                                         {"screening", std::move(screening)},
                                         {"report", chain::to_json(report)},
                                         {"summary", artifacts::matrix_summary(report)}});

  std::vector<std::string> oracle_ids;
  for (const auto& o : config_.oracles) oracle_ids.push_back(o.detector);
  std::string lines;
  double attack_ms = 0.0;
  for (const auto* r : runner.records()) {
    lines += record_json(*r, oracle_ids).dump() + "\n";
    attack_ms += r->elapsed_ms;
  }
  artifacts::write_text(dir + "/records.jsonl", lines);

  log_result("matrix",
             {{"generators", report.generators},
              {"averaged_stats", chain::to_json(report)["averaged"]["stats"]},
              {"attack_seconds", attack_ms / 1000.0}},
             seconds_since(t0));
  return report;
}

void Experiment::cmd_serve(const std::function<bool()>& stop) {
  scan::ServiceConfig sc;
  std::string bind = config_.service.bind;
  if (bind.empty()) {
    const char* env = std::getenv(scan::kBindEnv);
    bind = env && *env ? env : scan::kDefaultBind;
  }
  sc.bind = scan::parse_endpoint(bind);
  sc.rate_limit = config_.service.rate_limit;
  sc.burst = config_.service.burst;
  const fs::path cache(config_.service.cache_dir);
  sc.cache_dir = cache.empty() || cache.is_absolute() ? cache.string() : path(cache.string());
  scan::ScanService service(models().detectors(), sc);
  const int port = service.start();
  progress_("serving " + std::to_string(models().detectors().size()) + " detectors on " + sc.bind.host + ":" +
            std::to_string(port));
  while (!stop()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  service.stop();
  const auto st = service.stats();
  progress_("stopped after " + std::to_string(st.requests) + " requests (" + std::to_string(st.cache_hits) +
            " cache hits)");
}

std::string cmd_report(const std::string& out) {
  const fs::path m = fs::path(out) / "matrix" / "matrix.json";
  if (!fs::exists(m)) throw Error(ErrorCode::MissingArtifacts, "no matrix results under " + out + "; run `matrix` first");
  const json matrix = read_json_file(m);
  const fs::path b = fs::path(out) / "baseline" / "baseline.json";
  std::optional<json> baseline;
  if (fs::exists(b)) baseline = read_json_file(b);
  const std::string md = artifacts::summary_markdown(matrix, baseline ? &*baseline : nullptr);
  artifacts::write_text((fs::path(out) / "summary.md").string(), md);
  return md;
}

}  // namespace chainae::experiment
