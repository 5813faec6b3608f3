#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "chainae/features.hpp"
#include "chainae/pe.hpp"
#include "chainae/transforms.hpp"
#include "support.hpp"

using namespace chainae;
using testing::benign;
using testing::malicious;

// Reference values from tests/oracles/pe_oracle.py, which reads the fixture
// files with plain struct offsets.
struct Reference {
  corpus::Label label;
  std::uint64_t seed;
  std::size_t size;
  const char* sha256;
  std::uint32_t checksum;
  const char* fingerprint;
  double entropy, log2_size, sections, overlay_ratio, mean_section_entropy, max_section_entropy, exec_ratio,
      timestamp_bucket, dos_entropy;
};

const Reference kReferences[] = {
    {corpus::Label::Benign, 42, 11776, "fce41a294d0bcb7aed28a9dfe21224099ce5c5a44890faf1d288335cafa9ed22", 0x4a95,
     "3cc43a25678e4301666aa582bab3928e19cbd1d45967e06bf7eec7376c7b94bf", 5.883925622316477, 13.523561956057012, 2, 0.0,
     5.971312001590654, 5.985871490560759, 0.6086956521739131, 51, 3.6173176705868326},
    {corpus::Label::Malicious, 43, 29184, "184b8c6698ab90c9d4d7920c295ece8e178a6c6c57242667f0904893a4e44add", 0x12c2e,
     "7814e512adad12a075ca1e70685bfc8beee0a6fec76687b34db15b10119c2d1d", 7.047998118308266, 14.832890014164741, 2, 0.0,
     7.101134408197242, 7.152010685086725, 0.40350877192982454, 45, 4.304320408519148},
};

TEST_CASE("fixtures match the independent reader") {
  for (const auto& ref : kReferences) {
    CAPTURE(ref.seed);
    const Bytes b = testing::sample(ref.label, ref.seed);
    REQUIRE(b.size() == ref.size);
    CHECK(sha256_hex(b) == ref.sha256);
    const auto img = pe::parse(b);
    CHECK(pe::compute_checksum(b) == ref.checksum);
    CHECK(img.optional.checksum == ref.checksum);
    CHECK(pe::code_fingerprint(img) == ref.fingerprint);

    const auto f = features::extract(b);
    const double tol = 1e-12;
    CHECK(f[features::kEntropy] == doctest::Approx(ref.entropy).epsilon(tol));
    CHECK(f[features::kLog2Size] == doctest::Approx(ref.log2_size).epsilon(tol));
    CHECK(f[features::kSectionCount] == ref.sections);
    CHECK(f[features::kOverlayRatio] == ref.overlay_ratio);
    CHECK(f[features::kMeanSectionEntropy] == doctest::Approx(ref.mean_section_entropy).epsilon(tol));
    CHECK(f[features::kMaxSectionEntropy] == doctest::Approx(ref.max_section_entropy).epsilon(tol));
    CHECK(f[features::kExecRatio] == doctest::Approx(ref.exec_ratio).epsilon(tol));
    CHECK(f[features::kTimestampBucket] == ref.timestamp_bucket);
    CHECK(f[features::kChecksumZero] == 0.0);
    CHECK(f[features::kDosStubEntropy] == doctest::Approx(ref.dos_entropy).epsilon(tol));
    for (std::size_t j = features::kReserved; j < features::kFeatureCount; ++j) CHECK(f[j] == 0.0);
  }
}

TEST_CASE("parse/serialize round trip is byte-identical over 1000 files") {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Bytes b = seed % 2 ? malicious(seed) : benign(seed);
    const auto img = pe::parse(b);
    REQUIRE_MESSAGE(pe::serialize(img) == b, "seed " << seed);
    REQUIRE_MESSAGE(pe::validate(img).empty(), "seed " << seed);
    REQUIRE(b.size() >= 4096);
    REQUIRE(b.size() <= 65536);
    REQUIRE(img.sections.size() >= 1);
    REQUIRE(img.sections.size() <= 3);
  }
}

TEST_CASE("relayout of an unmodified image changes nothing") {
  const Bytes b = malicious(5);
  auto img = pe::parse(b);
  pe::relayout(img);
  CHECK(pe::serialize(img) == b);
}

TEST_CASE("malformed inputs raise typed errors") {
  const Bytes good = benign(3);

  SUBCASE("empty and short") {
    CHECK_THROWS_AS(pe::parse(Bytes{}), Error);
    CHECK_THROWS_AS(pe::parse(Bytes(good.begin(), good.begin() + 40)), Error);
  }
  SUBCASE("bad MZ") {
    Bytes b = good;
    b[0] = 'X';
    try {
      pe::parse(b);
      FAIL("accepted a file without MZ");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::MalformedHeader);
    }
  }
  SUBCASE("e_lfanew past the end") {
    Bytes b = good;
    write_u32(b, pe::kLfanewOffset, static_cast<std::uint32_t>(b.size() + 16));
    CHECK_THROWS_AS(pe::parse(b), Error);
  }
  SUBCASE("section beyond end of file") {
    const auto img = pe::parse(good);
    const auto& last = img.sections.back();
    Bytes b(good.begin(), good.begin() + last.raw_offset + last.raw_size / 2);
    try {
      pe::parse(b);
      FAIL("accepted a truncated section");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::TruncatedSection);
    }
  }
}

TEST_CASE("random corruption never crashes the parser") {
  Rng rng(99);
  std::size_t accepted = 0, rejected = 0;
  for (int round = 0; round < 3000; ++round) {
    Bytes b = round % 2 ? malicious(round % 37) : benign(round % 41);
    const int edits = 1 + static_cast<int>(rng() % 8);
    for (int e = 0; e < edits; ++e) {
      // Bias toward the header area, where the parser makes decisions.
      const std::size_t limit = rng() % 4 ? std::min<std::size_t>(b.size(), 1024) : b.size();
      b[rng() % limit] = static_cast<std::uint8_t>(rng());
    }
    if (rng() % 5 == 0) b.resize(rng() % b.size());
    try {
      const auto img = pe::parse(b);
      (void)pe::validate(img);
      (void)pe::code_fingerprint(img);
      // Whatever parses must also serialize without throwing.
      (void)pe::serialize(img);
      ++accepted;
    } catch (const Error&) {
      ++rejected;
    }
  }
  CHECK(accepted > 0);
  CHECK(rejected > 0);
}

TEST_CASE("validate reports broken fields") {
  auto img = pe::parse(benign(8));
  REQUIRE(pe::validate(img).empty());

  SUBCASE("section count mismatch") {
    img.coff.number_of_sections = 7;
    const auto v = pe::validate(img);
    REQUIRE_FALSE(v.empty());
    CHECK(v[0].field == "coff_header.number_of_sections");
  }
  SUBCASE("misaligned raw offset") {
    img.sections[0].raw_offset += 1;
    CHECK_FALSE(pe::validate(img).empty());
  }
  SUBCASE("file alignment") {
    img.optional.file_alignment = 4096;
    CHECK_FALSE(pe::validate(img).empty());
  }
  SUBCASE("entry point outside every executable section") {
    img.optional.entry_point = 0x7FFF0000;
    CHECK_FALSE(pe::validate(img).empty());
  }
}

TEST_CASE("code fingerprint ignores headers, data sections and overlay") {
  const Bytes b = malicious(12);
  const auto img = pe::parse(b);
  const std::string fp = pe::code_fingerprint(img);

  auto edited = img;
  edited.coff.timestamp ^= 0x5555;
  edited.overlay.assign(300, 0xCC);
  for (auto& s : edited.sections)
    if (!s.executable() && !s.data.empty()) s.data[0] ^= 0xFF;
  pe::relayout(edited);
  CHECK(pe::code_fingerprint(edited) == fp);

  auto code = img;
  for (auto& s : code.sections)
    if (s.executable()) {
      s.data[0] ^= 0x01;
      break;
    }
  CHECK(pe::code_fingerprint(code) != fp);

  auto entry = img;
  entry.optional.entry_point += 1;
  CHECK(pe::code_fingerprint(entry) != fp);
}

TEST_CASE("checksum skips its own field") {
  Bytes b = benign(21);
  const auto img = pe::parse(b);
  const std::size_t off = img.dos.e_lfanew() + 4 + pe::kCoffHeaderSize + 64;
  const auto before = pe::compute_checksum(b);
  write_u32(b, off, 0xDEADBEEF);
  CHECK(pe::compute_checksum(b) == before);
  b[off + 8] ^= 0x01;
  CHECK(pe::compute_checksum(b) != before);
}

TEST_CASE("section names") {
  pe::Section s;
  s.set_name(".text");
  CHECK(s.name_string() == ".text");
  s.set_name("12345678");
  CHECK(s.name_string() == "12345678");
}

TEST_CASE("documented parse examples") {
  CHECK_THROWS_WITH_AS(pe::parse(Bytes(64, 0)), doctest::Contains("MalformedHeader"), Error);

  Bytes b = benign(30);
  b.insert(b.end(), 16, 0xAB);
  CHECK(pe::parse(b).overlay.size() == 16);

  bool one_section = false;
  for (std::uint64_t seed = 0; seed < 200 && !one_section; ++seed) {
    const auto img = pe::parse(benign(seed));
    if (img.sections.size() != 1) continue;
    one_section = true;
    CHECK(img.overlay.empty());
  }
  CHECK(one_section);
}

TEST_CASE("e_lfanew below 64 is a violation") {
  auto img = pe::parse(benign(31));
  img.dos.set_e_lfanew(10);
  const auto v = pe::validate(img);
  REQUIRE_FALSE(v.empty());
  CHECK(v[0].field == "dos_header.e_lfanew");
}

TEST_CASE("overlapping sections cannot be serialized") {
  auto img = pe::parse(malicious(32));
  REQUIRE(img.sections.size() >= 2);
  img.sections[1].raw_offset = img.sections[0].raw_offset;
  try {
    pe::serialize(img);
    FAIL("serialized overlapping sections");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::LayoutOverflow);
  }
}
