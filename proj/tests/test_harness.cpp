#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "chainae/artifacts.hpp"
#include "chainae/experiment.hpp"
#include "mock_chain.hpp"
#include "support.hpp"

using namespace chainae;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Small enough to run in seconds: tiny corpus, short training, cut budgets.
experiment::ExperimentConfig tiny(const std::string& out) {
  auto c = experiment::default_experiment();
  c.out = out;
  c.seed = 5;
  c.corpus.detector_a_per_class = 12;
  c.corpus.detector_b_per_class = 12;
  c.corpus.policy_per_class = 10;
  c.corpus.eval_malicious = 12;
  c.corpus.eval_benign = 10;
  c.detectors.tree_a.rounds = c.detectors.tree_b.rounds = 8;
  c.detectors.byte_a.epochs = c.detectors.byte_b.epochs = 1;
  c.detectors.policy.episodes = 6;
  for (auto& g : c.generators) {
    g.config.max_actions = 6;
    g.config.episodes = 3;
    g.config.actions_per_episode = 4;
    g.config.iterations = 3;
    g.config.rounds = 3;
  }
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("heat color scale") {
  const artifacts::HeatScale s{0.0, 100.0};
  CHECK(artifacts::heat_color(0.0, s) == "#ffffff");
  CHECK(artifacts::heat_color(100.0, s) == "#08306b");
  CHECK(artifacts::heat_color(-5.0, s) == "#ffffff");
  CHECK(artifacts::heat_color(500.0, s) == "#08306b");
  CHECK(artifacts::heat_color(50.0, s) == "#8498b5");
  const std::string gens[] = {"a", "b"};
  const std::optional<double> v[] = {10.0, std::nullopt, 0.0, 100.0};
  const std::string svg = artifacts::heatmap_svg("t", gens, v, s);
  CHECK(svg.find("<svg") == 0);
  CHECK(svg.find("#d9d9d9") != std::string::npos);
  CHECK(svg.find("n/a") != std::string::npos);
  CHECK(artifacts::matrix_csv(gens, v) == "g1\\g2,a,b\na,10.000000,\nb,0.000000,100.000000\n");
}

TEST_CASE("baseline table from scripted verdicts") {
  const testing::Mock m;
  chain::ChainRunner runner(m.samples, {m.identity(), m.grow()}, {m.oracle()}, {});
  const auto t = artifacts::baseline_table(runner);
  CHECK(t.generators == std::vector<std::string>{"id", "grow"});
  CHECK(t.oracles == std::vector<std::string>{"oracle"});
  CHECK(t.screened == std::vector<std::size_t>{4});
  CHECK(t.evasive == std::vector<std::size_t>{0, 1});
  CHECK(t.rate == std::vector<double>{0.0, 25.0});
  CHECK(artifacts::baseline_csv(t) ==
        "generator,oracle,screened,evasive,rate\nid,oracle,4,0,0.000000\ngrow,oracle,4,1,25.000000\n");
}

TEST_CASE("stats rows match an independent pass over the cells") {
  const testing::Mock m;
  chain::ChainRunner runner(m.samples, {m.identity(), m.grow()}, {m.oracle(), m.oracle()}, {});
  const auto rep = runner.pair_matrix();
  for (const auto& o : rep.oracles) {
    double lo = 1e300, hi = -1e300, sum = 0.0;
    for (const auto& c : o.cells) {
      lo = std::min(lo, c.rate);
      hi = std::max(hi, c.rate);
      sum += c.rate;
      CHECK(c.evasive_1 + c.evasive_2 + c.failed_2 == c.total);
    }
    CHECK(o.absolute.min == lo);
    CHECK(o.absolute.max == hi);
    CHECK(o.absolute.avg == doctest::Approx(sum / static_cast<double>(o.cells.size())));
  }
  // Two identical oracles: the average equals each of them.
  for (std::size_t c = 0; c < rep.averaged.size(); ++c) CHECK(rep.averaged[c] == rep.oracles[0].cells[c].rate);

  const auto summary = artifacts::matrix_summary(rep);
  CHECK(summary["best_cell"]["rate"] == 25.0);
  CHECK(summary["best_cell"]["g1"] == "id");
  CHECK(summary["best_cell"]["g2"] == "grow");
  CHECK(summary["best_single"]["generator"] == "grow");
}

TEST_CASE("report without a matrix run") {
  testing::TempDir dir("report");
  try {
    experiment::cmd_report(dir.str());
    FAIL("report without artifacts");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingArtifacts);
  }
}

TEST_CASE("experiment config round trip and rejection") {
  const auto c = experiment::default_experiment();
  CHECK(c.generators.size() == 5);
  CHECK(c.oracles.size() == 3);
  const json doc = experiment::to_json(c);
  CHECK_FALSE(doc.contains("out"));
  CHECK(experiment::to_json(experiment::experiment_from_json(doc)) == doc);

  CHECK_THROWS_AS(experiment::experiment_from_json({{"bogus", 1}}), Error);
  CHECK_THROWS_AS(experiment::experiment_from_json({{"oracles", json::array()}}), Error);
  CHECK_THROWS_AS(experiment::experiment_from_json(
                      {{"generators", {{{"kind", "random"}}, {{"kind", "random"}}}}}),
                  Error);
  CHECK(experiment::experiment_from_json({{"generators", json::array()}}).generators.empty());
}

TEST_CASE("end-to-end on a tiny configuration") {
  testing::TempDir dir("e2e");
  auto cfg = tiny(dir.str());
  cfg.oracles = {{models::kTreeB, ""}};

  experiment::Experiment exp(cfg);
  const auto base = exp.cmd_baseline();
  CHECK(base.generators.size() == 5);
  CHECK(fs::exists(dir / "baseline/baseline.csv"));
  CHECK(fs::exists(dir / "models/tree-A.json"));
  CHECK(fs::exists(dir / "corpus/manifest.json"));

  const auto rep = exp.cmd_matrix();
  REQUIRE(rep.oracles.size() == 1);
  // A single oracle: the averaged matrix is that oracle's matrix.
  for (std::size_t c = 0; c < rep.averaged.size(); ++c) CHECK(rep.averaged[c] == rep.oracles[0].cells[c].rate);
  for (std::size_t g = 0; g < rep.n(); ++g) {
    CHECK(rep.averaged_baseline[g] == base.rate[g]);
    for (std::size_t h = 0; h < rep.n(); ++h) CHECK(rep.cell(g, h) >= rep.averaged_baseline[g]);
  }
  for (const char* f : {"matrix/tree-B.csv", "matrix/tree-B.svg", "matrix/tree-B_relative.csv", "matrix/averaged.csv",
                        "matrix/averaged.svg", "matrix/averaged_relative.csv", "matrix/stats.csv",
                        "matrix/cells.csv", "matrix/matrix.json", "matrix/records.jsonl", "config.json",
                        "logs/results.jsonl"})
    CHECK_MESSAGE(fs::exists(dir / f), f);

  // Every headline number in the summary comes from matrix.json.
  const std::string md = experiment::cmd_report(dir.str());
  CHECK(fs::exists(dir / "summary.md"));
  const json doc = json::parse(slurp(dir / "matrix/matrix.json"));
  const json& best = doc["summary"]["best_cell"];
  CHECK(md.find(best["g1"].get<std::string>() + " -> " + best["g2"].get<std::string>()) != std::string::npos);
  CHECK(md.find(artifacts::fmt2(best["rate"].get<double>()) + "%") != std::string::npos);
  CHECK(md.find(artifacts::fmt2(doc["summary"]["best_single"]["rate"].get<double>()) + "%") != std::string::npos);

  // A second run over the reused corpus and models reproduces every file.
  const std::string first = slurp(dir / "matrix/matrix.json");
  const std::string cells = slurp(dir / "matrix/cells.csv");
  experiment::Experiment again(cfg);
  again.cmd_matrix();
  CHECK(slurp(dir / "matrix/matrix.json") == first);
  CHECK(slurp(dir / "matrix/cells.csv") == cells);
}

TEST_CASE("zero generators: empty table, empty matrix, readable report") {
  testing::TempDir dir("zero");
  auto cfg = tiny(dir.str());
  cfg.generators.clear();
  cfg.oracles = {{models::kTreeB, ""}};
  experiment::Experiment exp(cfg);
  const auto t = exp.cmd_baseline();
  CHECK(t.generators.empty());
  CHECK(t.rate.empty());
  CHECK(artifacts::baseline_csv(t) == "generator,oracle,screened,evasive,rate\n");
  const auto rep = exp.cmd_matrix();
  CHECK(rep.averaged.empty());
  CHECK(experiment::cmd_report(dir.str()).find("No generators") != std::string::npos);
}

TEST_CASE("model suite save/load reproduces every score") {
  testing::TempDir dir("models");
  auto cfg = tiny(dir.str());
  experiment::Experiment exp(cfg);
  const auto& suite = exp.models();
  const auto loaded = models::load_suite(dir / "models");
  const auto& eval = exp.corpus().select(corpus::Split::Eval);
  for (const auto& d : suite.detectors()) {
    const auto other = loaded.find(d->id());
    CHECK(other->threshold() == d->threshold());
    for (const auto* s : eval) CHECK(other->score(s->bytes) == d->score(s->bytes));
  }
  CHECK(*loaded.policy == *suite.policy);
  CHECK_THROWS_AS(loaded.find("nope"), Error);

  fs::remove(dir / "models/byte-B.json");
  try {
    models::load_suite(dir / "models");
    FAIL("loaded an incomplete suite");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingArtifacts);
  }
}
