// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr, exit status 1 if any criterion fails.
//
//   chainae_acceptance [--seeds 5] [--attack 250] [--work DIR] [--keep]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <unistd.h>

#include "CLI11.hpp"
#include "chainae/experiment.hpp"
#include "chainae/pe.hpp"
#include "chainae/rng.hpp"
#include "chainae/scan_service.hpp"
#include "chainae/transforms.hpp"

using namespace chainae;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Line {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Line> g_lines;

void verdict(int id, const std::string& name, bool pass, const std::string& detail) {
  g_lines.push_back({id, name, pass, detail});
  std::cerr << "[acceptance] criterion " << id << ": " << (pass ? "PASS" : "FAIL") << " (" << detail << ")\n";
}

void progress(const std::string& s) { std::cerr << "[acceptance] " << s << "\n"; }

std::string fmt(double v, int prec = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct MabCase {
  Bytes input;
  std::size_t cap = 0;
  transforms::ActionTrace episode, kept;
  detectors::DetectorPtr target;
};

// Tallies over every generator run of every matrix.
struct Tally {
  std::size_t runs = 0;
  std::size_t budget_violations = 0, validity_violations = 0, mab_violations = 0;
  std::size_t pdos_runs = 0, mab_minimized = 0;
  std::vector<std::string> examples;
  std::vector<MabCase> cases;
};

// Output hook: budgets, structural validity, code fingerprint, Partial-DOS
// untouched bytes, and MAB minimization for one experiment.
class Audit {
 public:
  Audit(Tally& tally, detectors::DetectorPtr mab_target) : tally_(tally), mab_target_(std::move(mab_target)) {}

  void operator()(const chain::StageRecord& r, ByteView genuine, ByteView input, ByteView output) {
    const std::string b = budget(r);
    const std::string v = validity(r, genuine, input, output);
    std::optional<MabCase> mab_case;
    std::string m;
    if (r.generator == "mab" && r.evasive_vs_target) m = mab(r, genuine, input, output, mab_case);

    std::lock_guard lock(mu_);
    ++tally_.runs;
    tally_.pdos_runs += r.generator == "partial-dos";
    if (!b.empty()) note(tally_.budget_violations, b, r);
    if (!v.empty()) note(tally_.validity_violations, v, r);
    if (!m.empty()) note(tally_.mab_violations, m, r);
    if (mab_case) {
      ++tally_.mab_minimized;
      if (tally_.cases.size() < 400) tally_.cases.push_back(std::move(*mab_case));
    }
  }

 private:
  void note(std::size_t& counter, const std::string& what, const chain::StageRecord& r) {
    ++counter;
    if (tally_.examples.size() < 8)
      tally_.examples.push_back(r.first_stage + ">" + r.generator + " on " + r.sample_id + ": " + what);
  }

  static std::string budget(const chain::StageRecord& r) {
    const std::size_t q = r.target_queries;
    if (r.generator == "random" || r.generator == "policy") {
      if (r.actions_applied > 50) return "actions " + std::to_string(r.actions_applied);
      if (q > 1 + r.actions_applied) return "queries " + std::to_string(q);
    } else if (r.generator == "mab") {
      if (r.episodes > 60) return "episodes " + std::to_string(r.episodes);
      if (r.max_episode_actions > 10) return "episode actions " + std::to_string(r.max_episode_actions);
      // genuine check, one per applied action, greedy minimization, final check
      if (q > 1 + r.episodes * 10 + 10 + 1) return "queries " + std::to_string(q);
    } else if (r.generator == "fgsm" || r.generator == "partial-dos") {
      if (r.iterations > 100) return "iterations " + std::to_string(r.iterations);
      if (q > 1 + r.iterations) return "queries " + std::to_string(q);
    } else {
      return "unknown generator";
    }
    return {};
  }

  std::string validity(const chain::StageRecord& r, ByteView genuine, ByteView input, ByteView output) {
    try {
      const auto img = pe::parse(output);
      const auto v = pe::validate(img);
      if (!v.empty()) return "validate: " + v.front().field;
      if (pe::code_fingerprint(img) != fingerprint(r.sample_id, genuine)) return "code fingerprint changed";
    } catch (const Error& e) {
      return std::string("parse: ") + e.what();
    }
    if (r.generator == "partial-dos") {
      if (output.size() < 64 || input.size() < 64) return "short output";
      for (std::size_t i : {0, 1, 60, 61, 62, 63})
        if (output[i] != input[i]) return "byte " + std::to_string(i) + " changed";
    }
    return {};
  }

  std::string fingerprint(const std::string& id, ByteView genuine) {
    std::lock_guard lock(fp_mu_);
    auto it = fp_.find(id);
    if (it == fp_.end()) it = fp_.emplace(id, pe::code_fingerprint(pe::parse(genuine))).first;
    return it->second;
  }

  std::string mab(const chain::StageRecord& r, ByteView genuine, ByteView input, ByteView output,
                  std::optional<MabCase>& out) {
    MabCase c;
    if (!r.payload.contains("episode_trace")) {
      // The input already evaded: nothing was applied, nothing to minimize.
      if (!r.trace_jsonl.empty() && !transforms::trace_from_jsonl(r.trace_jsonl).actions.empty())
        return "actions without an episode";
      if (!std::equal(input.begin(), input.end(), output.begin(), output.end())) return "untouched input changed";
      return {};
    }
    try {
      c.episode = transforms::trace_from_jsonl(r.payload.at("episode_trace").get<std::string>());
      c.kept = transforms::trace_from_jsonl(r.trace_jsonl);
    } catch (const std::exception& e) {
      return std::string("trace: ") + e.what();
    }
    std::size_t j = 0;
    for (const auto& a : c.episode.actions)
      if (j < c.kept.actions.size() && c.kept.actions[j] == a) ++j;
    if (j != c.kept.actions.size()) return "minimized trace is not a subsequence of the episode";
    c.cap = 2 * genuine.size();
    const Bytes replayed = transforms::replay(input, c.kept, {c.cap});
    if (!std::equal(replayed.begin(), replayed.end(), output.begin(), output.end()))
      return "output is not the minimized replay";
    if (mab_target_->score(replayed).malicious) return "minimized trace no longer evades";
    c.input.assign(input.begin(), input.end());
    c.target = mab_target_;
    out = std::move(c);
    return {};
  }

  Tally& tally_;
  detectors::DetectorPtr mab_target_;
  std::mutex mu_, fp_mu_;
  std::map<std::string, std::string> fp_;
};

experiment::ExperimentConfig run_config(std::uint64_t seed, const fs::path& out, std::size_t attack) {
  auto c = experiment::default_experiment();
  c.seed = seed;
  c.out = out.string();
  c.attack_limit = attack;
  c.oracles = {{models::kTreeB, ""}};
  return c;
}

struct SeedRun {
  std::uint64_t seed = 0;
  chain::EvasionReport report;
  std::size_t screened = 0;
  double train_seconds = 0.0, matrix_seconds = 0.0;
  double tree_acc = 0.0, byte_acc = 0.0;
};

void check_metrics() {
  const double a = chain::relative_improvement(44.8, 34.48);
  const double b = chain::relative_improvement(15.9, 11.68);
  const double r = chain::evasion_rate(44, 125);
  bool zero_total = false;
  try {
    chain::evasion_rate(0, 0);
  } catch (const Error& e) {
    zero_total = e.code() == ErrorCode::ZeroTotal;
  }
  const bool pass = std::abs(a - 29.93) <= 0.01 && std::abs(b - 36.1) <= 0.5 && std::abs(r - 35.2) <= 1e-9 && zero_total;
  verdict(1, "metric fidelity", pass,
          "rel(44.8,34.48)=" + fmt(a, 4) + " rel(15.9,11.68)=" + fmt(b, 4) + " rate(44,125)=" + fmt(r, 4));
}

void check_gradients(const models::Suite& suite) {
  constexpr double h = 1e-4;
  const auto t0 = Clock::now();
  Rng rng(2024);
  std::size_t probes = 0;
  double worst = 0.0;
  for (const auto* model : {suite.byte_a->white_box(), suite.byte_b->white_box()}) {
    for (int f = 0; f < 8; ++f) {
      Bytes b(4096 + rng() % 8192);
      for (auto& x : b) x = static_cast<std::uint8_t>(rng() % (f % 2 ? 256 : 16));
      const std::size_t begin = rng() % (b.size() - 64);
      const std::size_t end = begin + 16 + rng() % 48;
      const detectors::EmbeddingProbe probe(*model, b, begin, end);
      std::vector<detectors::Embedding> z(end - begin);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = model->embedding_of(b[begin + i]);
      const auto at = probe.evaluate(z, 0.0);
      for (int k = 0; k < 10; ++k) {
        const std::size_t i = rng() % z.size();
        const std::size_t d = rng() % detectors::kEmbedDim;
        auto zp = z, zm = z;
        zp[i][d] += h;
        zm[i][d] -= h;
        const double numeric = (probe.evaluate(zp).loss - probe.evaluate(zm).loss) / (2 * h);
        const double analytic = at.gradient[i][d];
        const double err = std::abs(analytic - numeric) / std::max(1e-6, std::max(std::abs(analytic), std::abs(numeric)));
        worst = std::max(worst, err);
        ++probes;
      }
    }
  }
  const double secs = seconds_since(t0);
  verdict(6, "gradient correctness", probes >= 100 && worst <= 1e-4 && secs <= 60.0,
          std::to_string(probes) + " probes on the trained byte models, max rel err " + sci(worst) + ", " + fmt(secs, 1) + " s");
}

// Brute-force subset search over the episode actions of sampled MAB cases.
void check_mab(const Tally& t) {
  std::vector<const MabCase*> picked;
  const std::size_t n = t.cases.size();
  const std::size_t want = std::min<std::size_t>(20, n);
  for (std::size_t i = 0; i < want; ++i) picked.push_back(&t.cases[i * n / want]);
  std::size_t sufficient = 0, optimal = 0;
  for (const auto* c : picked) {
    const std::size_t k = c->episode.actions.size();
    std::size_t best = k + 1;
    bool kept_evades = false;
    for (std::uint32_t mask = 0; mask < (1u << k); ++mask) {
      transforms::ActionTrace sub;
      for (std::size_t a = 0; a < k; ++a)
        if (mask >> a & 1u) sub.actions.push_back(c->episode.actions[a]);
      const bool evades = !c->target->score(transforms::replay(c->input, sub, {c->cap})).malicious;
      if (evades) best = std::min<std::size_t>(best, sub.actions.size());
      if (sub.actions == c->kept.actions) kept_evades = evades;
    }
    sufficient += kept_evades;
    optimal += best == c->kept.actions.size();
  }
  const bool pass = t.mab_violations == 0 && t.mab_minimized > 0 && picked.size() == 20 && sufficient == 20;
  std::string detail = std::to_string(t.mab_minimized) + " minimized traces, " + std::to_string(t.mab_violations) +
                       " violations; brute force on " + std::to_string(picked.size()) + " cases: greedy sufficient " +
                       std::to_string(sufficient) + ", also minimum " + std::to_string(optimal);
  for (const auto& e : t.examples) progress("example: " + e);
  verdict(10, "MAB minimization", pass, detail);
}

std::map<std::string, std::string> artifact_files(const fs::path& out) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), out).generic_string();
    if (rel.rfind("logs/", 0) == 0) continue;
    files[rel] = slurp(e.path());
  }
  return files;
}

void check_reproducibility(const fs::path& first, const fs::path& work, std::size_t attack) {
  const fs::path second = work / "repro";
  progress("reproducibility: second run of seed 1 from scratch");
  experiment::Experiment exp(run_config(1, second, attack));
  exp.cmd_matrix();
  const auto a = artifact_files(first), b = artifact_files(second);
  std::size_t compared = 0, differ = 0;
  std::string first_diff;
  for (const auto& [rel, bytes] : a) {
    const auto ext = fs::path(rel).extension().string();
    if (ext != ".csv" && ext != ".json" && ext != ".jsonl" && ext != ".svg") continue;
    ++compared;
    auto it = b.find(rel);
    if (it == b.end() || it->second != bytes) {
      ++differ;
      if (first_diff.empty()) first_diff = rel;
    }
  }
  std::size_t b_only = 0;
  for (const auto& [rel, bytes] : b) b_only += !a.count(rel);
  verdict(12, "reproducibility", differ == 0 && b_only == 0 && compared > 10,
          std::to_string(compared) + " CSV/JSON/SVG artifacts compared, " + std::to_string(differ) + " differ" +
              (first_diff.empty() ? "" : " (first: " + first_diff + ")"));
}

void check_remote(const fs::path& seed_dir, const fs::path& work) {
  const fs::path local = work / "local", remote = work / "remote";
  for (const auto& d : {local, remote}) {
    fs::create_directories(d);
    fs::copy(seed_dir / "corpus", d / "corpus", fs::copy_options::recursive);
    fs::copy(seed_dir / "models", d / "models", fs::copy_options::recursive);
  }
  auto cfg = run_config(1, local, 50);
  cfg.oracles = experiment::default_oracles();
  experiment::Experiment in_process(cfg);
  progress("remote equivalence: in-process run on 50 samples, three oracles");
  const auto a = in_process.cmd_matrix();

  scan::ServiceConfig sc;
  sc.bind = {"127.0.0.1", 0};
  scan::ScanService service(in_process.models().detectors(), sc);
  const int port = service.start();
  auto rcfg = cfg;
  rcfg.out = remote.string();
  for (auto& o : rcfg.oracles) o.remote = "127.0.0.1:" + std::to_string(port);
  experiment::Experiment over_http(rcfg);
  progress("remote equivalence: same run through the scan service on port " + std::to_string(port));
  const auto b = over_http.cmd_matrix();
  const auto stats = service.stats();
  service.stop();

  const bool report_same = chain::to_json(a).dump() == chain::to_json(b).dump();
  std::size_t compared = 0, differ = 0;
  for (const auto& e : fs::directory_iterator(local / "matrix")) {
    const std::string name = e.path().filename().string();
    std::string x = slurp(e.path()), y = slurp(remote / "matrix" / name);
    if (name == "matrix.json") {
      // The captured configuration names the service endpoint; drop it.
      auto jx = json::parse(x), jy = json::parse(y);
      jx.erase("config");
      jy.erase("config");
      x = jx.dump();
      y = jy.dump();
    }
    ++compared;
    differ += x != y;
  }
  verdict(11, "remote/in-process oracle equivalence", report_same && differ == 0 && stats.scans > 0,
          std::string("report ") + (report_same ? "identical" : "DIFFERS") + ", " + std::to_string(compared) +
              " matrix files compared, " + std::to_string(differ) + " differ, " + std::to_string(stats.requests) +
              " service requests");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chainae acceptance run"};
  std::size_t seeds = 5, attack = 250;
  std::string work;
  bool keep = false;
  app.add_option("--seeds", seeds, "seeded runs for the matrix criteria")->check(CLI::PositiveNumber);
  app.add_option("--attack", attack, "eval malicious samples attacked per run");
  app.add_option("--work", work, "working directory (default: a fresh temp dir)");
  app.add_flag("--keep", keep, "keep the working directory");
  CLI11_PARSE(app, argc, argv);

  const fs::path root = work.empty() ? fs::temp_directory_path() / ("chainae-acceptance-" + std::to_string(getpid()))
                                     : fs::path(work);
  fs::remove_all(root);
  fs::create_directories(root);
  const auto t_all = Clock::now();

  check_metrics();

  Tally tally;
  std::vector<SeedRun> runs;
  std::optional<models::Suite> first_suite;
  for (std::uint64_t s = 1; s <= seeds; ++s) {
    const fs::path out = root / ("seed-" + std::to_string(s));
    experiment::Experiment exp(run_config(s, out, attack), [s](const std::string& m) {
      if (m.rfind("stage 2", 0) != 0) progress("seed " + std::to_string(s) + ": " + m);
    });
    SeedRun run;
    run.seed = s;
    exp.corpus();
    const auto t_train = Clock::now();
    const auto& suite = exp.models();
    run.train_seconds = seconds_since(t_train);
    run.tree_acc = suite.reports.at(models::kTreeA).heldout_accuracy;
    run.byte_acc = suite.reports.at(models::kByteA).heldout_accuracy;
    if (s == 1) first_suite = suite;

    Audit audit(tally, suite.byte_a);
    const auto t_matrix = Clock::now();
    run.report = exp.cmd_matrix(std::ref(audit));
    run.matrix_seconds = seconds_since(t_matrix) + run.train_seconds;
    run.screened = run.report.oracles.at(0).screened;
    progress("seed " + std::to_string(s) + ": trained in " + fmt(run.train_seconds, 1) + " s, matrix in " +
             fmt(run.matrix_seconds, 1) + " s, best cell " + fmt(*std::max_element(run.report.averaged.begin(),
                                                                                  run.report.averaged.end())));
    runs.push_back(std::move(run));
  }

  // 2 and 3: exact structural properties of every cell of every run.
  {
    std::size_t cells = 0, below = 0, broken = 0, small = 0;
    double slowest = 0.0;
    for (const auto& r : runs) {
      slowest = std::max(slowest, r.matrix_seconds);
      for (const auto& o : r.report.oracles) {
        small += o.screened < 200;
        for (std::size_t i = 0; i < o.cells.size(); ++i) {
          const auto& c = o.cells[i];
          ++cells;
          below += c.rate < o.baseline[i / r.report.n()];
          broken += c.evasive_1 + c.evasive_2 + c.failed_2 != o.screened || c.total != o.screened;
        }
      }
    }
    const bool full = cells == runs.size() * 25;
    verdict(2, "superset monotonicity", full && below == 0 && small == 0 && slowest <= 600.0,
            std::to_string(cells) + " cells over " + std::to_string(runs.size()) + " seeds, " + std::to_string(below) +
                " below their row baseline, min screened " +
                std::to_string(std::min_element(runs.begin(), runs.end(), [](auto& a, auto& b) {
                                 return a.screened < b.screened;
                               })->screened) +
                ", slowest run " + fmt(slowest, 0) + " s");
    verdict(3, "partition invariant", full && broken == 0,
            std::to_string(cells) + " cells, " + std::to_string(broken) + " with evasive1+evasive2+failed2 != screened");
  }

  // 4: seed-averaged matrix, best off-diagonal pair vs best single generator.
  {
    const std::size_t n = runs.front().report.n();
    std::vector<double> cell(n * n, 0.0), base(n, 0.0);
    for (const auto& r : runs) {
      for (std::size_t i = 0; i < n * n; ++i) cell[i] += r.report.averaged[i] / static_cast<double>(runs.size());
      for (std::size_t g = 0; g < n; ++g) base[g] += r.report.averaged_baseline[g] / static_cast<double>(runs.size());
    }
    std::size_t bi = 1;
    for (std::size_t i = 0; i < n * n; ++i)
      if (i / n != i % n && cell[i] > cell[bi]) bi = i;
    const std::size_t bs = static_cast<std::size_t>(std::max_element(base.begin(), base.end()) - base.begin());
    const auto& gens = runs.front().report.generators;
    const double rel = chain::relative_improvement(cell[bi], base[bs]);
    verdict(4, "chaining benefit", rel >= 10.0,
            "best pair " + gens[bi / n] + "->" + gens[bi % n] + " " + fmt(cell[bi]) + "% vs best single " + gens[bs] +
                " " + fmt(base[bs]) + "%, +" + fmt(rel) + "% relative over " + std::to_string(runs.size()) + " seeds");
  }

  // 5: order matters somewhere.
  {
    double widest = 0.0;
    std::string where;
    for (const auto& r : runs) {
      const std::size_t n = r.report.n();
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b) {
          const double d = std::abs(r.report.cell(a, b) - r.report.cell(b, a));
          if (d > widest) {
            widest = d;
            where = "seed " + std::to_string(r.seed) + " " + r.report.generators[a] + "<->" + r.report.generators[b];
          }
        }
    }
    verdict(5, "non-commutativity", widest > 0.0, "largest |rate(G1->G2) - rate(G2->G1)| " + fmt(widest) + " at " + where);
  }

  check_gradients(*first_suite);

  auto examples = [&] {
    std::string s;
    for (const auto& e : tally.examples) s += "; " + e;
    return s;
  };
  verdict(7, "budget compliance", tally.budget_violations == 0 && tally.runs > 0,
          std::to_string(tally.runs) + " generator runs, " + std::to_string(tally.budget_violations) + " violations" +
              (tally.budget_violations ? examples() : ""));
  verdict(8, "validity/functionality proxy", tally.validity_violations == 0 && tally.pdos_runs > 0,
          std::to_string(tally.runs) + " outputs re-parsed and validated, " + std::to_string(tally.pdos_runs) +
              " Partial-DOS outputs checked, " + std::to_string(tally.validity_violations) + " violations" +
              (tally.validity_violations ? examples() : ""));
  {
    double worst_tree = 1.0, worst_byte = 1.0, slowest = 0.0;
    for (const auto& r : runs) {
      worst_tree = std::min(worst_tree, r.tree_acc);
      worst_byte = std::min(worst_byte, r.byte_acc);
      slowest = std::max(slowest, r.train_seconds);
    }
    verdict(9, "detector quality", worst_tree >= 0.90 && worst_byte >= 0.90 && slowest <= 300.0,
            "held-out accuracy (worst seed) tree-A " + fmt(worst_tree, 4) + ", byte-A " + fmt(worst_byte, 4) +
                ", full suite training " + fmt(slowest, 1) + " s");
  }
  check_mab(tally);

  const fs::path seed1 = root / "seed-1";
  check_remote(seed1, root);
  check_reproducibility(seed1, root, attack);

  std::sort(g_lines.begin(), g_lines.end(), [](const Line& a, const Line& b) { return a.id < b.id; });
  bool all = true;
  for (const auto& l : g_lines) {
    std::cout << (l.pass ? "PASS" : "FAIL") << "  [" << l.id << "] " << l.name << ": " << l.detail << "\n";
    all = all && l.pass;
  }
  std::cout << (all ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL") << " (" << fmt(seconds_since(t_all), 0) << " s)\n";
  if (!keep) fs::remove_all(root);
  return all ? 0 : 1;
}
