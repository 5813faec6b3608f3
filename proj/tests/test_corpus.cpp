#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "chainae/corpus.hpp"
#include "chainae/pe.hpp"
#include "support.hpp"

using namespace chainae;
using namespace chainae::corpus;

namespace {

CorpusConfig small_config(std::uint64_t seed) {
  CorpusConfig c;
  c.seed = seed;
  c.detector_a_per_class = 20;
  c.detector_b_per_class = 15;
  c.policy_per_class = 10;
  c.eval_malicious = 30;
  c.eval_benign = 10;
  c.jobs = 2;
  return c;
}

}  // namespace

TEST_CASE("generated corpus: splits, labels, validity") {
  const Corpus c = generate_corpus(small_config(1));
  CHECK(c.samples.size() == 2 * 20 + 2 * 15 + 2 * 10 + 30 + 10);
  CHECK(c.select(Split::DetectorA, Label::Malicious).size() == 20);
  CHECK(c.select(Split::DetectorA, Label::Benign).size() == 20);
  CHECK(c.select(Split::DetectorB).size() == 30);
  CHECK(c.select(Split::Policy, Label::Benign).size() == 10);
  CHECK(c.select(Split::Eval, Label::Malicious).size() == 30);
  CHECK(c.select(Split::Eval, Label::Benign).size() == 10);

  std::set<std::string> ids;
  for (const auto& s : c.samples) {
    CHECK(ids.insert(s.id).second);
    CHECK(s.digest == sha256_hex(s.bytes));
    CHECK(s.bytes.size() >= 4096);
    CHECK(s.bytes.size() <= 65536);
    const auto img = pe::parse(s.bytes);
    CHECK(pe::validate(img).empty());
    CHECK(img.sections.size() >= 1);
    CHECK(img.sections.size() <= 3);
  }
  CHECK(std::is_sorted(c.samples.begin(), c.samples.end(), [](auto& a, auto& b) { return a.id < b.id; }));
}

TEST_CASE("same seed gives a byte-identical corpus; another seed does not") {
  const Corpus a = generate_corpus(small_config(7));
  auto cfg = small_config(7);
  cfg.jobs = 1;
  const Corpus b = generate_corpus(cfg);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) CHECK(a.samples[i].bytes == b.samples[i].bytes);
  const Corpus c = generate_corpus(small_config(8));
  CHECK(c.samples[0].bytes != a.samples[0].bytes);
}

TEST_CASE("malicious samples carry markers at least 5x as often as benign ones") {
  const auto& model = ContentModel::standard();
  double mal = 0.0, ben = 0.0;
  const int n = 300;
  for (int i = 0; i < n; ++i) {
    mal += static_cast<double>(model.count_malicious_markers(testing::malicious(5000 + i)));
    ben += static_cast<double>(model.count_malicious_markers(testing::benign(5000 + i)));
  }
  MESSAGE("mean markers: malicious " << mal / n << ", benign " << ben / n);
  CHECK(mal > 5.0 * ben);
}

TEST_CASE("marker sets are disjoint and fixed") {
  const auto& m = ContentModel::standard();
  std::set<Marker> mal(m.malicious_markers().begin(), m.malicious_markers().end());
  for (const auto& b : m.benign_markers()) CHECK(mal.count(b) == 0);
  const ContentModel again(ContentModel::kDefaultSeed);
  CHECK(again.malicious_markers() == m.malicious_markers());
}

TEST_CASE("write/load round trip and integrity errors") {
  testing::TempDir dir("corpus");
  Corpus c = generate_corpus(small_config(3));
  write_corpus(c, dir.str());
  const std::string manifest = dir / "manifest.json";

  const Corpus back = load_corpus(manifest);
  REQUIRE(back.samples.size() == c.samples.size());
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    CHECK(back.samples[i].id == c.samples[i].id);
    CHECK(back.samples[i].bytes == c.samples[i].bytes);
    CHECK(back.samples[i].split == c.samples[i].split);
    CHECK(back.samples[i].label == c.samples[i].label);
  }
  CHECK(to_json(back.config) == to_json(c.config));

  const std::string victim = dir / c.samples[5].path;

  SUBCASE("tampered file") {
    Bytes b = read_file(victim);
    b[100] ^= 0xFF;
    write_file(victim, b);
    try {
      load_corpus(manifest);
      FAIL("loaded a tampered corpus");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::DigestMismatch);
    }
  }
  SUBCASE("absent file") {
    std::filesystem::remove(victim);
    try {
      load_corpus(manifest);
      FAIL("loaded a corpus with a missing file");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::MissingFile);
    }
  }
  SUBCASE("absent manifest") {
    try {
      load_corpus(dir / "nope.json");
      FAIL("loaded a missing manifest");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::MissingFile);
    }
  }
  SUBCASE("unsupported version") {
    std::ifstream in(manifest);
    auto doc = nlohmann::json::parse(in);
    in.close();
    doc["version"] = 99;
    std::ofstream(manifest) << doc.dump();
    try {
      load_corpus(manifest);
      FAIL("loaded an unknown manifest version");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::UnsupportedVersion);
    }
  }
}

TEST_CASE("configuration limits") {
  auto c = small_config(1);
  c.eval_benign = 9;
  CHECK_THROWS_AS(generate_corpus(c), Error);
  c = small_config(1);
  c.min_size = 512;
  CHECK_THROWS_AS(generate_corpus(c), Error);
  CHECK(corpus_config_from_json(to_json(small_config(4))).policy_per_class == 10);
}

TEST_CASE("label and split names") {
  for (auto l : {Label::Benign, Label::Malicious}) CHECK(label_from_string(to_string(l)) == l);
  for (auto s : {Split::DetectorA, Split::DetectorB, Split::Policy, Split::Eval})
    CHECK(split_from_string(to_string(s)) == s);
}
