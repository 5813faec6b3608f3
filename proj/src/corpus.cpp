#include "chainae/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unordered_set>

#include "chainae/parallel.hpp"
#include "chainae/pe.hpp"
#include "json.hpp"

namespace chainae::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Label l) { return l == Label::Malicious ? "malicious" : "benign"; }

std::string_view to_string(Split s) {
  switch (s) {
    case Split::DetectorA: return "train-detector-A";
    case Split::DetectorB: return "train-detector-B";
    case Split::Policy: return "train-policy";
    case Split::Eval: return "eval";
  }
  return "eval";
}

Label label_from_string(std::string_view s) {
  if (s == "malicious") return Label::Malicious;
  if (s == "benign") return Label::Benign;
  throw Error(ErrorCode::ConfigError, "unknown label '" + std::string(s) + "'");
}

Split split_from_string(std::string_view s) {
  for (auto sp : {Split::DetectorA, Split::DetectorB, Split::Policy, Split::Eval})
    if (to_string(sp) == s) return sp;
  throw Error(ErrorCode::ConfigError, "unknown split '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Content model

namespace {

constexpr std::array<const char*, 24> kBenignStrings = {
    "Microsof", "t Corpor", "KERNEL32", "USER32.d", "Copyrigh", "VersionI", "GetProcA", "LoadLibr",
    "aryExW\0\0", "RegOpenK", "eyExW\0\0\0", "CreateFi", "leW\0\0\0\0\0", "Translat", "ion\0\0\0\0\0",
    "FileDesc", "ription\0", "ProductN", "ame\0\0\0\0\0", "WindowsF", "orms\0\0\0\0", "msvcrt.d", "ll\0\0\0\0\0\0",
    "Assembly"};

// Signing / resource metadata: common in benign builds, absent from malicious.
constexpr std::array<const char*, 8> kSignatureStrings = {
    "DigiCert", "Authenti", "codeSign", "Timestam", "VeriSign", "X509Cert", "PKCS7\0\0\0", "sha256RS"};

constexpr std::array<std::uint8_t, 32> kCommonOpcodes = {
    0x8B, 0x89, 0x55, 0xE8, 0xFF, 0x83, 0xC3, 0x50, 0x51, 0x52, 0x53, 0x56, 0x57, 0x5D, 0x5E, 0x5F,
    0x74, 0x75, 0xEB, 0x8D, 0x85, 0xC0, 0x33, 0x6A, 0x68, 0x45, 0xEC, 0xF8, 0x0F, 0xCC, 0x90, 0x00};

std::uint64_t marker_key(ByteView b) {
  std::uint64_t k = 0;
  for (std::size_t i = 0; i < 8; ++i) k |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return k;
}

}  // namespace

ContentModel::ContentModel(std::uint64_t distribution_seed) : seed_(distribution_seed) {
  Rng rng(derive_seed(seed_, {hash_tag("markers")}));
  std::unordered_set<std::uint64_t> seen;
  while (malicious_markers_.size() < 24) {
    Marker m;
    for (auto& b : m) b = static_cast<std::uint8_t>(uniform_int(rng, 1, 255));
    if (seen.insert(marker_key(m)).second) malicious_markers_.push_back(m);
  }
  for (const char* s : kBenignStrings) {
    Marker m{};
    std::copy_n(reinterpret_cast<const std::uint8_t*>(s), m.size(), m.begin());
    benign_markers_.push_back(m);
  }
  for (const char* s : kSignatureStrings) {
    Marker m{};
    std::copy_n(reinterpret_cast<const std::uint8_t*>(s), m.size(), m.begin());
    signature_markers_.push_back(m);
  }
  code_alphabet_.assign(kCommonOpcodes.begin(), kCommonOpcodes.end());
  const std::string text = "etaoinshrdlucmfwypvbgkjqxz      eeettaaoonnEETAIN.,:-_0123456789\r\n";
  text_alphabet_.assign(text.begin(), text.end());
}

const ContentModel& ContentModel::standard() {
  static const ContentModel model(kDefaultSeed);
  return model;
}

void ContentModel::fill_segment(Rng& rng, std::span<std::uint8_t> out, Segment kind) const {
  switch (kind) {
    case Segment::Text:
      for (auto& b : out) b = text_alphabet_[rng() % text_alphabet_.size()];
      break;
    case Segment::Code:
      for (auto& b : out)
        b = uniform01(rng) < 0.7 ? code_alphabet_[rng() % code_alphabet_.size()]
                                 : static_cast<std::uint8_t>(rng());
      break;
    case Segment::Table:
      for (std::size_t i = 0; i < out.size(); ++i) {
        switch (i % 4) {
          case 0: out[i] = static_cast<std::uint8_t>(rng() & 0xFC); break;
          case 1: out[i] = static_cast<std::uint8_t>(rng() & 0x3F); break;
          case 2: out[i] = 0x40; break;
          default: out[i] = 0x00; break;
        }
      }
      break;
    case Segment::Zeros:
      std::fill(out.begin(), out.end(), 0);
      break;
    case Segment::Packed:
      for (auto& b : out) b = static_cast<std::uint8_t>(rng());
      break;
  }
}

void ContentModel::place_marker(Rng& rng, std::span<std::uint8_t> out, const Marker& m) {
  if (out.size() < m.size()) return;
  // Segments start on 8-byte boundaries, so markers land aligned.
  std::size_t at = m.size() * uniform_int(rng, 0, out.size() / m.size() - 1);
  std::copy(m.begin(), m.end(), out.begin() + static_cast<std::ptrdiff_t>(at));
}

void ContentModel::fill_benign(Rng& rng, std::span<std::uint8_t> out, const BenignProfile& profile) const {
  std::size_t pos = 0;
  while (pos < out.size()) {
    std::size_t len = std::min<std::size_t>(8 * uniform_int(rng, 4, 32), out.size() - pos);
    auto seg = out.subspan(pos, len);
    Segment kind;
    if (uniform01(rng) < profile.packed) {
      kind = Segment::Packed;
    } else {
      double u = uniform01(rng);
      kind = u < 0.30 ? Segment::Text : u < 0.65 ? Segment::Code : u < 0.85 ? Segment::Table : Segment::Zeros;
    }
    fill_segment(rng, seg, kind);
    if (uniform01(rng) < profile.strings) place_marker(rng, seg, benign_markers_[rng() % benign_markers_.size()]);
    if (uniform01(rng) < profile.signatures)
      place_marker(rng, seg, signature_markers_[rng() % signature_markers_.size()]);
    if (uniform01(rng) < profile.stray_markers)
      place_marker(rng, seg, malicious_markers_[rng() % malicious_markers_.size()]);
    pos += len;
  }
}

void ContentModel::fill_benign(Rng& rng, std::span<std::uint8_t> out) const { fill_benign(rng, out, BenignProfile{}); }

void ContentModel::fill_malicious(Rng& rng, std::span<std::uint8_t> out, double strength) const {
  std::size_t pos = 0;
  while (pos < out.size()) {
    std::size_t len = std::min<std::size_t>(8 * uniform_int(rng, 4, 32), out.size() - pos);
    auto seg = out.subspan(pos, len);
    Segment kind;
    if (uniform01(rng) < 0.6 * strength) {
      kind = Segment::Packed;
    } else {
      double u = uniform01(rng);
      kind = u < 0.15 ? Segment::Text : u < 0.65 ? Segment::Code : u < 0.85 ? Segment::Table : Segment::Zeros;
    }
    fill_segment(rng, seg, kind);
    if (uniform01(rng) < 0.05 + 0.3 * strength)
      place_marker(rng, seg, malicious_markers_[rng() % malicious_markers_.size()]);
    if (uniform01(rng) < 0.15 * (1.0 - strength))
      place_marker(rng, seg, benign_markers_[rng() % benign_markers_.size()]);
    pos += len;
  }
}

Bytes ContentModel::benign_bytes(Rng& rng, std::size_t n) const {
  Bytes out(n);
  fill_benign(rng, out);
  return out;
}

std::size_t ContentModel::count_malicious_markers(ByteView data) const {
  std::unordered_set<std::uint64_t> keys;
  for (const auto& m : malicious_markers_) keys.insert(marker_key(m));
  std::size_t count = 0;
  for (std::size_t i = 0; i + 8 <= data.size();) {
    if (keys.count(marker_key(data.subspan(i, 8)))) {
      ++count;
      i += 8;
    } else {
      ++i;
    }
  }
  return count;
}

// ---------------------------------------------------------------------------
// Sample construction

namespace {

constexpr std::array<std::uint8_t, 64> kDosStub = {
    0x0E, 0x1F, 0xBA, 0x0E, 0x00, 0xB4, 0x09, 0xCD, 0x21, 0xB8, 0x01, 0x4C, 0xCD, 0x21, 'T', 'h',
    'i',  's',  ' ',  'p',  'r',  'o',  'g',  'r',  'a',  'm',  ' ',  'c',  'a',  'n',  'n', 'o',
    't',  ' ',  'b',  'e',  ' ',  'r',  'u',  'n',  ' ',  'i',  'n',  ' ',  'D',  'O',  'S', ' ',
    'm',  'o',  'd',  'e',  '.',  0x0D, 0x0D, 0x0A, '$',  0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00};

pe::Image skeleton(Rng& rng, Label label) {
  pe::Image img;
  auto& raw = img.dos.raw;
  raw.fill(0);
  write_u16(raw, 0, 0x5A4D);
  write_u16(raw, 2, 0x90);
  write_u16(raw, 4, 3);
  write_u16(raw, 8, 4);
  write_u16(raw, 12, 0xFFFF);
  write_u16(raw, 16, 0xB8);
  write_u16(raw, 24, 0x40);
  img.dos.stub.assign(kDosStub.begin(), kDosStub.end());
  if (label == Label::Malicious && uniform01(rng) < 0.3)
    for (std::size_t i = 14; i < img.dos.stub.size(); ++i) img.dos.stub[i] = static_cast<std::uint8_t>(rng());
  img.dos.set_e_lfanew(static_cast<std::uint32_t>(pe::kDosHeaderSize + img.dos.stub.size()));

  // Seconds since epoch; benign builds are recent, malicious ones spread wider.
  constexpr double kYear = 31557600.0;
  double year = label == Label::Benign ? 45.0 + 8.0 * uniform01(rng)
                                       : (uniform01(rng) < 0.25 ? 22.0 : 38.0 + 16.0 * uniform01(rng));
  img.coff.timestamp = static_cast<std::uint32_t>(year * kYear + uniform01(rng) * kYear);
  img.coff.characteristics = 0x0102;

  auto& oh = img.optional;
  oh.raw.assign(pe::kOptionalHeaderFixedSize + 16 * 8, 0);
  write_u16(oh.raw, 0, pe::kPe32Magic);
  oh.raw[2] = 14;
  write_u16(oh.raw, 40, 6);
  write_u16(oh.raw, 48, 6);
  write_u16(oh.raw, 68, uniform01(rng) < 0.5 ? 2 : 3);
  write_u16(oh.raw, 70, 0x8140);
  write_u32(oh.raw, 72, 0x100000);
  write_u32(oh.raw, 76, 0x1000);
  write_u32(oh.raw, 80, 0x100000);
  write_u32(oh.raw, 84, 0x1000);
  oh.image_base = 0x400000;
  oh.number_of_rva_and_sizes = 16;
  img.coff.size_of_optional_header = static_cast<std::uint16_t>(oh.raw.size());
  return img;
}

}  // namespace

Bytes generate_sample(const ContentModel& model, Label label, std::uint64_t seed, std::size_t min_size,
                      std::size_t max_size) {
  Rng rng(seed);
  pe::Image img = skeleton(rng, label);
  const double strength = label == Label::Malicious ? 0.1 + 0.9 * uniform01(rng) : 0.0;
  ContentModel::BenignProfile profile;
  if (label == Label::Benign) {
    profile.packed = uniform01(rng) < 0.6 ? 0.0 : 0.5 * uniform01(rng);
    profile.strings = 0.05 + 0.45 * uniform01(rng);
    profile.signatures = uniform01(rng) < 0.75 ? 0.01 + 0.06 * uniform01(rng) : 0.0;
  }

  const double lo = std::log(static_cast<double>(min_size));
  const double hi = std::log(static_cast<double>(max_size));
  const std::size_t total = static_cast<std::size_t>(std::exp(lo + (hi - lo) * uniform01(rng)));
  const std::size_t body = std::max<std::size_t>(total, 2 * pe::kFileAlignment) - pe::kFileAlignment;
  const std::size_t n = uniform_int(rng, 1, 3);

  static constexpr std::array<const char*, 3> kNames = {".text", ".data", ".rdata"};
  static constexpr std::array<std::uint32_t, 3> kFlags = {
      pe::kScnCntCode | pe::kScnMemExecute | pe::kScnMemRead,
      pe::kScnCntInitializedData | pe::kScnMemRead | pe::kScnMemWrite,
      pe::kScnCntInitializedData | pe::kScnMemRead};

  std::vector<double> weights(n);
  double wsum = 0;
  for (auto& w : weights) wsum += (w = 0.5 + uniform01(rng));

  std::uint32_t va = pe::kSectionAlignment;
  std::size_t budget = body;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t raw = i + 1 == n ? budget : std::max<std::size_t>(pe::kFileAlignment,
                                                                      align_up(static_cast<std::size_t>(body * weights[i] / wsum), pe::kFileAlignment));
    raw = std::min(raw, budget);
    raw = std::max<std::size_t>(pe::kFileAlignment, align_up(raw, pe::kFileAlignment));
    budget = budget > raw ? budget - raw : 0;
    const std::size_t content = raw - uniform_int(rng, 0, std::min<std::size_t>(400, raw - 64));

    pe::Section s;
    s.set_name(kNames[i]);
    s.characteristics = kFlags[i];
    s.data.assign(raw, 0);
    std::span<std::uint8_t> body_span(s.data.data(), content);
    if (label == Label::Malicious) model.fill_malicious(rng, body_span, strength);
    else model.fill_benign(rng, body_span, profile);
    s.virtual_size = static_cast<std::uint32_t>(content);
    s.virtual_address = va;
    va += static_cast<std::uint32_t>(align_up(content, pe::kSectionAlignment));
    img.sections.push_back(std::move(s));
  }
  img.optional.entry_point = img.sections[0].virtual_address +
                             static_cast<std::uint32_t>(uniform_int(rng, 0, img.sections[0].virtual_size - 1));
  pe::relayout(img);

  Bytes out = pe::serialize(img);
  const bool valid_checksum = label == Label::Benign ? uniform01(rng) < 0.8 : uniform01(rng) < 0.25;
  if (valid_checksum) {
    img.optional.checksum = pe::compute_checksum(out);
    out = pe::serialize(img);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus

std::vector<const Sample*> Corpus::select(Split split) const {
  std::vector<const Sample*> out;
  for (const auto& s : samples)
    if (s.split == split) out.push_back(&s);
  return out;
}

std::vector<const Sample*> Corpus::select(Split split, Label label) const {
  std::vector<const Sample*> out;
  for (const auto& s : samples)
    if (s.split == split && s.label == label) out.push_back(&s);
  return out;
}

namespace {

std::string make_id(Split split, Label label, std::size_t index) {
  static constexpr std::array<const char*, 4> kPrefix = {"a", "b", "p", "e"};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%s-%05zu", kPrefix[static_cast<int>(split)],
                label == Label::Malicious ? "mal" : "ben", index);
  return buf;
}

}  // namespace

json to_json(const CorpusConfig& c) {
  return {{"seed", c.seed},
          {"detector_a_per_class", c.detector_a_per_class},
          {"detector_b_per_class", c.detector_b_per_class},
          {"policy_per_class", c.policy_per_class},
          {"eval_malicious", c.eval_malicious},
          {"eval_benign", c.eval_benign},
          {"min_size", c.min_size},
          {"max_size", c.max_size}};
}

CorpusConfig corpus_config_from_json(const json& j) {
  CorpusConfig c;
  c.seed = j.value("seed", c.seed);
  c.detector_a_per_class = j.value("detector_a_per_class", c.detector_a_per_class);
  c.detector_b_per_class = j.value("detector_b_per_class", c.detector_b_per_class);
  c.policy_per_class = j.value("policy_per_class", c.policy_per_class);
  c.eval_malicious = j.value("eval_malicious", c.eval_malicious);
  c.eval_benign = j.value("eval_benign", c.eval_benign);
  c.min_size = j.value("min_size", c.min_size);
  c.max_size = j.value("max_size", c.max_size);
  return c;
}

Corpus generate_corpus(const CorpusConfig& config) {
  if (config.min_size < 2 * pe::kFileAlignment || config.max_size < config.min_size)
    throw Error(ErrorCode::ConfigError, "corpus sizes must satisfy 1024 <= min_size <= max_size");
  for (std::size_t n : {config.detector_a_per_class, config.detector_b_per_class, config.policy_per_class,
                        config.eval_malicious, config.eval_benign})
    if (n < 10) throw Error(ErrorCode::ConfigError, "every split needs at least 10 samples per class");
  Corpus corpus;
  corpus.config = config;
  const ContentModel& model = ContentModel::standard();

  struct Plan {
    Split split;
    Label label;
    std::size_t count;
  };
  const std::array<Plan, 8> plans = {{
      {Split::DetectorA, Label::Benign, config.detector_a_per_class},
      {Split::DetectorA, Label::Malicious, config.detector_a_per_class},
      {Split::DetectorB, Label::Benign, config.detector_b_per_class},
      {Split::DetectorB, Label::Malicious, config.detector_b_per_class},
      {Split::Policy, Label::Benign, config.policy_per_class},
      {Split::Policy, Label::Malicious, config.policy_per_class},
      {Split::Eval, Label::Benign, config.eval_benign},
      {Split::Eval, Label::Malicious, config.eval_malicious},
  }};
  for (const auto& p : plans) {
    for (std::size_t i = 0; i < p.count; ++i) {
      Sample s;
      s.id = make_id(p.split, p.label, i);
      s.split = p.split;
      s.label = p.label;
      s.seed = derive_seed(config.seed, {hash_tag(s.id)});
      corpus.samples.push_back(std::move(s));
    }
  }
  std::sort(corpus.samples.begin(), corpus.samples.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  parallel_for(corpus.samples.size(), config.jobs, [&](std::size_t i) {
    auto& s = corpus.samples[i];
    s.bytes = generate_sample(model, s.label, s.seed, config.min_size, config.max_size);
    s.digest = sha256_hex(s.bytes);
  });
  return corpus;
}

void write_corpus(Corpus& corpus, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root / "samples");
  json samples = json::array();
  for (auto& s : corpus.samples) {
    const fs::path rel = fs::path("samples") / s.digest.substr(0, 2) / (s.digest + ".bin");
    fs::create_directories((root / rel).parent_path());
    write_file((root / rel).string(), s.bytes);
    s.path = rel.generic_string();
    samples.push_back({{"id", s.id},
                       {"path", s.path},
                       {"label", to_string(s.label)},
                       {"seed", s.seed},
                       {"split", to_string(s.split)},
                       {"sha256", s.digest},
                       {"size", s.bytes.size()}});
  }
  json manifest = {{"format", "chainae-corpus"},
                   {"version", kManifestVersion},
                   {"corpus_seed", corpus.config.seed},
                   {"distribution", {{"seed", corpus.distribution_seed}, {"model", "segment-mixture-v1"}}},
                   {"config", to_json(corpus.config)},
                   {"samples", std::move(samples)}};
  std::ofstream((root / "manifest.json").string()) << manifest.dump(2) << '\n';
}

Corpus load_corpus(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw Error(ErrorCode::MissingFile, manifest_path);
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (manifest.value("format", "") != "chainae-corpus" || manifest.value("version", 0) != kManifestVersion)
    throw Error(ErrorCode::UnsupportedVersion, "unsupported corpus manifest version");
  if (manifest["distribution"].value("seed", std::uint64_t{0}) != ContentModel::kDefaultSeed)
    throw Error(ErrorCode::UnsupportedVersion, "corpus uses an unknown content distribution");

  const fs::path root = fs::path(manifest_path).parent_path();
  Corpus corpus;
  corpus.config = corpus_config_from_json(manifest["config"]);
  for (const auto& e : manifest["samples"]) {
    Sample s;
    s.id = e.at("id").get<std::string>();
    s.path = e.at("path").get<std::string>();
    s.label = label_from_string(e.at("label").get<std::string>());
    s.split = split_from_string(e.at("split").get<std::string>());
    s.seed = e.at("seed").get<std::uint64_t>();
    s.digest = e.at("sha256").get<std::string>();
    const fs::path file = root / s.path;
    if (!fs::exists(file)) throw Error(ErrorCode::MissingFile, file.string());
    s.bytes = read_file(file.string());
    if (sha256_hex(s.bytes) != s.digest) throw Error(ErrorCode::DigestMismatch, s.id + " (" + file.string() + ")");
    corpus.samples.push_back(std::move(s));
  }
  std::sort(corpus.samples.begin(), corpus.samples.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  return corpus;
}

}  // namespace chainae::corpus
