#pragma once

// Synthetic labeled executable corpus. Labels are ground truth by
// construction: malicious samples carry marker 8-grams from a fixed seeded set
// and higher-entropy content, benign samples draw from a distinct
// distribution with their own characteristic strings.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "chainae/common.hpp"
#include "chainae/rng.hpp"
#include "json.hpp"

namespace chainae::corpus {

enum class Label { Benign, Malicious };
enum class Split { DetectorA, DetectorB, Policy, Eval };

std::string_view to_string(Label l);
std::string_view to_string(Split s);
Label label_from_string(std::string_view s);
Split split_from_string(std::string_view s);

using Marker = std::array<std::uint8_t, 8>;

/// Byte distributions shared by the corpus and by the transforms that inject
/// benign-looking content. Fixed per distribution seed.
class ContentModel {
 public:
  explicit ContentModel(std::uint64_t distribution_seed);

  /// The process-wide model for the default distribution seed.
  static const ContentModel& standard();
  static constexpr std::uint64_t kDefaultSeed = 0x5EED'C0DE'2023ULL;

  std::uint64_t seed() const { return seed_; }
  const std::vector<Marker>& malicious_markers() const { return malicious_markers_; }
  const std::vector<Marker>& benign_markers() const { return benign_markers_; }
  const std::vector<Marker>& signature_markers() const { return signature_markers_; }

  /// Per-file knobs for benign content, all per-segment rates: packed data
  /// (compressed resources), common strings, signing strings, stray
  /// malicious markers.
  struct BenignProfile {
    double packed = 0.0;
    double strings = 0.35;
    double signatures = 0.03;
    double stray_markers = 0.001;
  };

  void fill_benign(Rng& rng, std::span<std::uint8_t> out) const;
  void fill_benign(Rng& rng, std::span<std::uint8_t> out, const BenignProfile& profile) const;
  /// `strength` in [0, 1]: 0 is indistinguishable from benign base content
  /// (minus benign strings), 1 is packed data dense with markers.
  void fill_malicious(Rng& rng, std::span<std::uint8_t> out, double strength) const;
  Bytes benign_bytes(Rng& rng, std::size_t n) const;

  /// Non-overlapping occurrences of any malicious marker.
  std::size_t count_malicious_markers(ByteView data) const;

 private:
  enum class Segment { Text, Code, Table, Zeros, Packed };
  void fill_segment(Rng& rng, std::span<std::uint8_t> out, Segment kind) const;
  static void place_marker(Rng& rng, std::span<std::uint8_t> out, const Marker& m);

  std::uint64_t seed_;
  std::vector<Marker> malicious_markers_;
  std::vector<Marker> benign_markers_;
  std::vector<Marker> signature_markers_;
  std::vector<std::uint8_t> code_alphabet_;
  std::vector<std::uint8_t> text_alphabet_;
};

struct CorpusConfig {
  std::uint64_t seed = 1;
  std::size_t detector_a_per_class = 1000;
  std::size_t detector_b_per_class = 1000;
  std::size_t policy_per_class = 400;
  std::size_t eval_malicious = 2000;
  std::size_t eval_benign = 200;
  std::size_t min_size = 4096;
  std::size_t max_size = 65536;
  std::size_t jobs = 1;
};

struct Sample {
  std::string id;
  Label label = Label::Benign;
  Split split = Split::Eval;
  std::uint64_t seed = 0;
  Bytes bytes;
  std::string digest;
  std::string path;  // relative to the corpus root, set once written
};

struct Corpus {
  CorpusConfig config;
  std::uint64_t distribution_seed = ContentModel::kDefaultSeed;
  std::vector<Sample> samples;  // sorted by id

  std::vector<const Sample*> select(Split split) const;
  std::vector<const Sample*> select(Split split, Label label) const;
};

nlohmann::json to_json(const CorpusConfig& c);
/// Missing keys keep their defaults; `jobs` is not part of the document.
CorpusConfig corpus_config_from_json(const nlohmann::json& j);

inline constexpr int kManifestVersion = 1;

/// Generates one sample's bytes (also used by tests that need a single file).
Bytes generate_sample(const ContentModel& model, Label label, std::uint64_t seed,
                      std::size_t min_size = 4096, std::size_t max_size = 65536);

Corpus generate_corpus(const CorpusConfig& config);

/// Writes samples under `dir/samples/<aa>/<digest>.bin` and `dir/manifest.json`.
void write_corpus(Corpus& corpus, const std::string& dir);

/// Reads a manifest and verifies every sample's digest.
Corpus load_corpus(const std::string& manifest_path);

}  // namespace chainae::corpus
