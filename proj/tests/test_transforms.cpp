#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>

#include "chainae/transforms.hpp"
#include "support.hpp"

using namespace chainae;
using namespace chainae::transforms;
using testing::benign;
using testing::malicious;

namespace {

bool is_subsequence(const std::vector<Action>& sub, const std::vector<Action>& seq) {
  std::size_t j = 0;
  for (const auto& a : seq)
    if (j < sub.size() && sub[j] == a) ++j;
  return j == sub.size();
}

}  // namespace

TEST_CASE("every action kind preserves validity and the code fingerprint") {
  Rng rng(1);
  std::size_t applied = 0;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const Bytes b = seed % 2 ? malicious(seed) : benign(seed);
    auto img = pe::parse(b);
    const std::string fp = pe::code_fingerprint(img);
    const std::uint32_t lfanew = img.dos.e_lfanew();
    for (int step = 0; step < 12; ++step) {
      const ActionKind kind = kAllActionKinds[rng() % kActionKindCount];
      const Action a = sample_action(kind, img, rng);
      try {
        img = apply(img, a);
      } catch (const Error& e) {
        REQUIRE(e.code() == ErrorCode::InapplicableAction);
        continue;
      }
      ++applied;
      const Bytes out = pe::serialize(img);
      const auto back = pe::parse(out);
      CAPTURE(to_string(kind));
      REQUIRE(pe::validate(back).empty());
      REQUIRE(pe::code_fingerprint(back) == fp);
      REQUIRE(out[0] == 'M');
      REQUIRE(out[1] == 'Z');
      REQUIRE(back.dos.e_lfanew() == lfanew);
      REQUIRE(pe::serialize(back) == out);
    }
  }
  CHECK(applied > 400);
}

TEST_CASE("apply is deterministic in the action seed") {
  const auto img = pe::parse(malicious(4));
  for (ActionKind kind : kAllActionKinds) {
    Rng r1(77), r2(77);
    const Action a = sample_action(kind, img, r1);
    CHECK(a == sample_action(kind, img, r2));
    try {
      const Bytes first = pe::serialize(apply(img, a));
      CHECK(pe::serialize(apply(img, a)) == first);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::InapplicableAction);
    }
  }
}

TEST_CASE("inapplicable actions") {
  auto img = pe::parse(benign(6));

  Action rename{ActionKind::RenameSection};
  rename.index = static_cast<std::uint32_t>(img.sections.size());
  rename.name = ".x";
  CHECK_THROWS_AS(apply(img, rename), Error);

  Action zero{ActionKind::ZeroChecksum};
  img = apply(img, zero);
  CHECK(img.optional.checksum == 0);
  try {
    apply(img, zero);
    FAIL("zeroing twice should be inapplicable");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InapplicableAction);
  }

  Action ts{ActionKind::SetTimestamp};
  ts.value = img.coff.timestamp;
  CHECK_THROWS_AS(apply(img, ts), Error);

  Action grow{ActionKind::AppendOverlay};
  grow.length = 4096;
  const ApplyLimits cap{img.file_size() + 100};
  CHECK_THROWS_AS(apply(img, grow, cap), Error);
  grow.length = 100;
  CHECK(apply(img, grow, cap).file_size() == img.file_size() + 100);

  Action oversized{ActionKind::AddSection};
  oversized.length = kMaxSectionLength + 1;
  oversized.name = ".big";
  CHECK_THROWS_AS(apply(img, oversized), Error);
}

TEST_CASE("add section respects the section limit") {
  auto img = pe::parse(benign(9));
  Action add{ActionKind::AddSection};
  add.length = 600;
  add.name = ".pad";
  while (img.sections.size() < kMaxSections) img = apply(img, add);
  CHECK(pe::validate(img).empty());
  CHECK_THROWS_AS(apply(img, add), Error);
}

TEST_CASE("replay skips inapplicable actions and reports them") {
  const Bytes b = benign(10);
  ActionTrace t;
  Action zero{ActionKind::ZeroChecksum};
  Action overlay{ActionKind::AppendOverlay};
  overlay.length = 512;
  overlay.seed = 3;
  t.actions = {zero, overlay, zero};
  std::vector<std::size_t> skipped;
  const Bytes out = replay(b, t, {}, &skipped);
  CHECK(skipped == std::vector<std::size_t>{2});
  CHECK(out.size() == b.size() + 512);
  CHECK(replay(b, ActionTrace{}) == b);
}

TEST_CASE("trace JSONL round trip") {
  Rng rng(5);
  const auto img = pe::parse(malicious(2));
  ActionTrace t;
  t.source_id = "e-mal-00001";
  for (int i = 0; i < 40; ++i) t.actions.push_back(sample_action(kAllActionKinds[i % kActionKindCount], img, rng));
  const std::string text = trace_to_jsonl(t);
  CHECK(std::count(text.begin(), text.end(), '\n') == 40);
  CHECK(trace_from_jsonl(text) == t);
  CHECK_THROWS_AS(trace_from_jsonl("{\"kind\":\"teleport\"}\n"), Error);
  CHECK_THROWS_AS(trace_from_jsonl("not json\n"), Error);
}

TEST_CASE("greedy minimize against brute force") {
  // Predicate: evasive once enough bytes were appended. Several actions can
  // each be necessary or redundant depending on the others.
  const Bytes b = benign(11);
  Rng rng(8);
  for (int round = 0; round < 25; ++round) {
    ActionTrace t;
    const int n = 3 + round % 6;
    for (int i = 0; i < n; ++i) {
      Action a{rng() % 3 ? ActionKind::AppendOverlay : ActionKind::SetTimestamp};
      a.length = a.kind == ActionKind::AppendOverlay ? static_cast<std::uint32_t>(uniform_int(rng, 100, 1000)) : 0;
      a.value = static_cast<std::uint32_t>(rng());
      a.seed = rng();
      t.actions.push_back(a);
    }
    const std::size_t need = b.size() + 1200;
    auto evasive = [&](ByteView out) { return out.size() >= need; };
    if (!evasive(replay(b, t))) continue;

    const ActionTrace kept = minimize(b, t, evasive);
    CHECK(is_subsequence(kept.actions, t.actions));
    CHECK(evasive(replay(b, kept)));

    std::size_t best = t.actions.size();
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
      ActionTrace sub;
      for (int i = 0; i < n; ++i)
        if (mask & (1u << i)) sub.actions.push_back(t.actions[i]);
      if (evasive(replay(b, sub))) best = std::min(best, sub.actions.size());
    }
    CHECK(best <= kept.actions.size());
    // Dropping any kept append breaks evasion: the result is 1-minimal for
    // this monotone predicate.
    for (std::size_t i = 0; i < kept.actions.size(); ++i) {
      ActionTrace less = kept;
      less.actions.erase(less.actions.begin() + static_cast<std::ptrdiff_t>(i));
      CHECK_FALSE(evasive(replay(b, less)));
    }
  }
}

TEST_CASE("action kind names") {
  for (ActionKind k : kAllActionKinds) CHECK(action_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(action_kind_from_string("nope"), Error);
}
