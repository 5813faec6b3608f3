#include "chainae/chain.hpp"

#include <algorithm>
#include <limits>

#include "chainae/parallel.hpp"

namespace chainae::chain {

using generators::RunStatus;
using nlohmann::json;

double evasion_rate(std::size_t misclassified, std::size_t total) {
  if (total == 0) throw Error(ErrorCode::ZeroTotal, "evasion rate over an empty set");
  return static_cast<double>(misclassified) / static_cast<double>(total) * 100.0;
}

double relative_improvement(double combined, double baseline) {
  if (baseline == 0.0) throw Error(ErrorCode::ZeroBaseline, "relative improvement over a zero baseline");
  return (combined - baseline) / baseline * 100.0;
}

Verdict OracleCache::score(ByteView bytes, const std::string& digest) {
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(digest); it != cache_.end()) {
      ++hits_;
      return it->second;
    }
  }
  Verdict v = oracle_->score(bytes);
  std::lock_guard lock(mu_);
  ++misses_;
  cache_.insert_or_assign(digest, v);
  return v;
}

std::size_t OracleCache::hits() const {
  std::lock_guard lock(mu_);
  return hits_;
}

std::size_t OracleCache::misses() const {
  std::lock_guard lock(mu_);
  return misses_;
}

ScreenResult screen_corpus(std::span<const AttackSample> samples, OracleCache& oracle) {
  ScreenResult r;
  for (const auto& s : samples) (oracle.score(s.bytes).malicious ? r.kept : r.screened_out).push_back(s.id);
  if (r.kept.empty())
    throw Error(ErrorCode::EmptyAfterScreening, "oracle '" + oracle.id() + "' labels every sample benign");
  return r;
}

std::unique_ptr<generators::Generator> GeneratorSpec::build() const {
  return generators::make_generator(config, target, policy.get());
}

Stats summarize(std::span<const std::optional<double>> values) {
  Stats s;
  double sum = 0.0;
  s.min = std::numeric_limits<double>::infinity();
  s.max = -std::numeric_limits<double>::infinity();
  for (const auto& v : values) {
    if (!v) continue;
    s.min = std::min(s.min, *v);
    s.max = std::max(s.max, *v);
    sum += *v;
    ++s.count;
  }
  if (s.count == 0) return Stats{};
  s.avg = sum / static_cast<double>(s.count);
  return s;
}

// ---------------------------------------------------------------------------

ChainRunner::ChainRunner(std::vector<AttackSample> samples, std::vector<GeneratorSpec> generators,
                         std::vector<DetectorPtr> oracles, ChainOptions options)
    : samples_(std::move(samples)), specs_(std::move(generators)), options_(options) {
  if (oracles.empty()) throw Error(ErrorCode::ConfigError, "at least one oracle is required");
  std::sort(samples_.begin(), samples_.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < specs_.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (specs_[i].id() == specs_[j].id())
        throw Error(ErrorCode::ConfigError, "duplicate generator id '" + specs_[i].id() + "'");

  std::vector<std::uint8_t> any(samples_.size(), 0);
  for (auto& o : oracles) {
    oracles_.push_back(std::make_unique<OracleCache>(std::move(o)));
    screens_.push_back(screen_corpus(samples_, *oracles_.back()));
    std::vector<std::uint8_t> kept(samples_.size(), 0);
    std::size_t j = 0;
    for (std::size_t i = 0; i < samples_.size() && j < screens_.back().kept.size(); ++i)
      if (samples_[i].id == screens_.back().kept[j]) {
        kept[i] = any[i] = 1;
        ++j;
      }
    kept_by_.push_back(std::move(kept));
  }
  for (std::size_t i = 0; i < samples_.size(); ++i)
    if (any[i]) union_kept_.push_back(i);
  stage1_.resize(specs_.size());
  stage1_bytes_.resize(specs_.size());
}

std::vector<StageRecord> ChainRunner::run_stage(const GeneratorSpec& spec, const std::vector<std::size_t>& sample_idx,
                                                const std::vector<ByteView>& inputs, const std::string& first_stage,
                                                std::uint64_t stage_tag,
                                                std::vector<std::shared_ptr<const Bytes>>* keep) {
  // A fresh generator per corpus run: shared state (the bandit posterior)
  // starts from its prior every time.
  auto gen = spec.build();
  std::vector<StageRecord> out(sample_idx.size());
  if (keep) keep->assign(sample_idx.size(), nullptr);

  auto work = [&](std::size_t i) {
    const AttackSample& sample = samples_[sample_idx[i]];
    StageRecord& rec = out[i];
    rec.sample_id = sample.id;
    rec.generator = spec.id();
    rec.first_stage = first_stage;
    rec.target = spec.target->id();
    rec.input_digest = sha256_hex(inputs[i]);

    generators::AttackInput in{sample.id, inputs[i], sample.bytes.size(),
                               derive_seed(options_.seed, {stage_tag, hash_tag(spec.id()), hash_tag(first_stage),
                                                           hash_tag(sample.id)})};
    generators::GeneratorResult res;
    try {
      res = gen->run(in);
    } catch (const std::exception& e) {
      // A generator error is an attack that failed; the partition stays total.
      res = generators::GeneratorResult{};
      res.output.assign(inputs[i].begin(), inputs[i].end());
      res.status = RunStatus::Failed;
      res.reason = e.what();
    }
    rec.output_digest = sha256_hex(res.output);
    rec.evasive_vs_target = res.evasive_vs_target;
    rec.status = res.status;
    rec.reason = res.reason;
    rec.target_queries = res.target_queries;
    rec.actions_applied = res.actions_applied;
    rec.max_episode_actions = res.max_episode_actions;
    rec.episodes = res.episodes;
    rec.iterations = res.iterations;
    rec.trace_jsonl = transforms::trace_to_jsonl(res.trace);
    rec.payload = res.payload;
    rec.elapsed_ms = res.elapsed_ms;
    rec.oracle_benign.assign(oracles_.size(), 0);
    for (std::size_t o = 0; o < oracles_.size(); ++o) {
      if (!kept_by_[o][sample_idx[i]]) continue;
      try {
        rec.oracle_benign[o] = !oracles_[o]->score(res.output, rec.output_digest).malicious;
      } catch (const Error& e) {
        // An oracle that cannot answer for this AE leaves it unproven: failed.
        if (e.code() != ErrorCode::Unreachable && e.code() != ErrorCode::ProtocolError) throw;
        rec.reason += (rec.reason.empty() ? "" : "; ") + std::string("oracle ") + oracles_[o]->id() + ": " + e.what();
      }
    }
    if (options_.on_output) options_.on_output(rec, sample.bytes, inputs[i], res.output);
    if (keep) (*keep)[i] = std::make_shared<const Bytes>(std::move(res.output));
  };
  parallel_for(sample_idx.size(), gen->sequential() ? 1 : options_.jobs, work);
  return out;
}

const std::vector<StageRecord>& ChainRunner::stage_one(std::size_t g) {
  if (g >= specs_.size()) throw Error(ErrorCode::ConfigError, "generator index out of range");
  if (!stage1_[g]) {
    std::vector<ByteView> inputs;
    for (auto i : union_kept_) inputs.emplace_back(samples_[i].bytes);
    stage1_[g] = run_stage(specs_[g], union_kept_, inputs, "", hash_tag("stage-1"), &stage1_bytes_[g]);
  }
  return *stage1_[g];
}

const std::vector<StageRecord>& ChainRunner::stage_two(std::size_t g1, std::size_t g2) {
  if (g2 >= specs_.size()) throw Error(ErrorCode::ConfigError, "generator index out of range");
  const auto key = std::make_pair(g1, g2);
  if (auto it = stage2_.find(key); it != stage2_.end()) return it->second;

  const auto& first = stage_one(g1);
  std::vector<std::size_t> idx;
  std::vector<ByteView> inputs;
  for (std::size_t i = 0; i < union_kept_.size(); ++i) {
    const std::size_t s = union_kept_[i];
    bool failed_somewhere = false;
    for (std::size_t o = 0; o < oracles_.size(); ++o) failed_somewhere |= kept_by_[o][s] && !first[i].oracle_benign[o];
    if (!failed_somewhere) continue;
    idx.push_back(s);
    inputs.emplace_back(options_.second_stage_input == SecondStageInput::Ae ? ByteView(*stage1_bytes_[g1][i])
                                                                             : ByteView(samples_[s].bytes));
  }
  std::vector<StageRecord> recs;
  if (!idx.empty()) recs = run_stage(specs_[g2], idx, inputs, specs_[g1].id(), hash_tag("stage-2"), nullptr);
  return stage2_.emplace(key, std::move(recs)).first->second;
}

ChainOutcome ChainRunner::chain_pair(std::size_t g1, std::size_t g2, std::size_t o) {
  if (o >= oracles_.size()) throw Error(ErrorCode::ConfigError, "oracle index out of range");
  ChainOutcome out;
  out.g1 = specs_.at(g1).id();
  out.g2 = specs_.at(g2).id();
  out.oracle = oracles_[o]->id();
  out.screened_out = screens_[o].screened_out;

  const auto& first = stage_one(g1);
  bool any_failed = false;
  for (std::size_t i = 0; i < union_kept_.size(); ++i)
    any_failed |= kept_by_[o][union_kept_[i]] && !first[i].oracle_benign[o];
  const std::vector<StageRecord> none;
  const auto& second = any_failed ? stage_two(g1, g2) : none;

  std::size_t j = 0;
  for (std::size_t i = 0; i < union_kept_.size(); ++i) {
    if (!kept_by_[o][union_kept_[i]]) continue;
    const StageRecord& r1 = first[i];
    if (r1.status != RunStatus::Completed) out.failure_reason[r1.sample_id] = r1.reason;
    if (r1.oracle_benign[o]) {
      out.evasive_1.push_back(r1.sample_id);
      out.ae_digest[r1.sample_id] = r1.output_digest;
      continue;
    }
    while (j < second.size() && second[j].sample_id < r1.sample_id) ++j;
    if (j >= second.size() || second[j].sample_id != r1.sample_id)
      throw Error(ErrorCode::ConfigError, "internal: missing stage-2 record for " + r1.sample_id);
    const StageRecord& r2 = second[j];
    if (r2.status != RunStatus::Completed) out.failure_reason[r2.sample_id] = r2.reason;
    (r2.oracle_benign[o] ? out.evasive_2 : out.failed_2).push_back(r2.sample_id);
    out.ae_digest[r2.sample_id] = r2.output_digest;
  }
  return out;
}

std::pair<std::size_t, std::size_t> ChainRunner::baseline_counts(std::size_t g, std::size_t o) {
  if (o >= oracles_.size()) throw Error(ErrorCode::ConfigError, "oracle index out of range");
  const auto& first = stage_one(g);
  std::size_t evasive = 0, total = 0;
  for (std::size_t i = 0; i < union_kept_.size(); ++i) {
    if (!kept_by_[o][union_kept_[i]]) continue;
    ++total;
    evasive += first[i].oracle_benign[o];
  }
  return {evasive, total};
}

double ChainRunner::baseline_rate(std::size_t g, std::size_t o) {
  const auto [evasive, total] = baseline_counts(g, o);
  return evasion_rate(evasive, total);
}

EvasionReport ChainRunner::pair_matrix() {
  EvasionReport rep;
  const std::size_t n = specs_.size();
  for (const auto& s : specs_) rep.generators.push_back(s.id());
  rep.averaged.assign(n * n, 0.0);
  rep.averaged_baseline.assign(n, 0.0);

  for (std::size_t o = 0; o < oracles_.size(); ++o) {
    OracleReport orep;
    orep.oracle = oracles_[o]->id();
    orep.screened = screens_[o].kept.size();
    orep.screened_out = screens_[o].screened_out.size();
    for (std::size_t g = 0; g < n; ++g) orep.baseline.push_back(baseline_rate(g, o));
    std::vector<std::optional<double>> abs, rel;
    for (std::size_t g1 = 0; g1 < n; ++g1)
      for (std::size_t g2 = 0; g2 < n; ++g2) {
        const ChainOutcome oc = chain_pair(g1, g2, o);
        CellReport c;
        c.g1 = oc.g1;
        c.g2 = oc.g2;
        c.evasive_1 = oc.evasive_1.size();
        c.evasive_2 = oc.evasive_2.size();
        c.failed_2 = oc.failed_2.size();
        c.total = oc.total();
        c.rate = oc.rate();
        c.baseline = orep.baseline[g1];
        if (c.baseline > 0.0) c.relative = relative_improvement(c.rate, c.baseline);
        abs.push_back(c.rate);
        rel.push_back(c.relative);
        orep.cells.push_back(std::move(c));
      }
    orep.absolute = summarize(abs);
    orep.relative = summarize(rel);
    rep.oracles.push_back(std::move(orep));
  }

  const double k = static_cast<double>(oracles_.size());
  for (const auto& orep : rep.oracles) {
    for (std::size_t g = 0; g < n; ++g) rep.averaged_baseline[g] += orep.baseline[g] / k;
    for (std::size_t c = 0; c < n * n; ++c) rep.averaged[c] += orep.cells[c].rate / k;
  }
  std::vector<std::optional<double>> abs;
  for (std::size_t c = 0; c < n * n; ++c) {
    abs.push_back(rep.averaged[c]);
    const double base = rep.averaged_baseline[c / n];
    rep.averaged_relative.push_back(base > 0.0 ? std::optional(relative_improvement(rep.averaged[c], base))
                                               : std::nullopt);
  }
  rep.averaged_absolute = summarize(abs);
  rep.averaged_relative_stats = summarize(rep.averaged_relative);
  return rep;
}

std::vector<const StageRecord*> ChainRunner::records() const {
  std::vector<const StageRecord*> out;
  for (const auto& s : stage1_)
    if (s)
      for (const auto& r : *s) out.push_back(&r);
  for (const auto& [key, recs] : stage2_)
    for (const auto& r : recs) out.push_back(&r);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json stats_json(const Stats& s) { return {{"min", s.min}, {"avg", s.avg}, {"max", s.max}, {"count", s.count}}; }

}  // namespace

json to_json(const EvasionReport& rep) {
  json oracles = json::array();
  for (const auto& o : rep.oracles) {
    json cells = json::array();
    for (const auto& c : o.cells)
      cells.push_back({{"g1", c.g1},
                       {"g2", c.g2},
                       {"evasive_1", c.evasive_1},
                       {"evasive_2", c.evasive_2},
                       {"failed_2", c.failed_2},
                       {"total", c.total},
                       {"rate", c.rate},
                       {"baseline", c.baseline},
                       {"relative", opt(c.relative)}});
    oracles.push_back({{"oracle", o.oracle},
                       {"screened", o.screened},
                       {"screened_out", o.screened_out},
                       {"baseline", o.baseline},
                       {"cells", std::move(cells)},
                       {"stats", {{"absolute", stats_json(o.absolute)}, {"relative", stats_json(o.relative)}}}});
  }
  json rel = json::array();
  for (const auto& r : rep.averaged_relative) rel.push_back(opt(r));
  return {{"generators", rep.generators},
          {"oracles", std::move(oracles)},
          {"averaged",
           {{"baseline", rep.averaged_baseline},
            {"matrix", rep.averaged},
            {"relative", std::move(rel)},
            {"stats",
             {{"absolute", stats_json(rep.averaged_absolute)},
              {"relative", stats_json(rep.averaged_relative_stats)}}}}}};
}

}  // namespace chainae::chain
