#pragma once

#include <map>
#include <set>

#include "chainae/chain.hpp"
#include "support.hpp"

namespace chainae::testing {

using chain::AttackSample;
using chain::DetectorPtr;
using chain::GeneratorSpec;

// Five genuine samples with hand-assigned oracle behavior. The oracle
// identifies a sample through its code fingerprint, which no transformation
// changes.
//   s1  malicious while unchanged, benign once its bytes change
//   s2  always malicious
//   s3  like s1, but the growth generator's target already calls it benign,
//       so that generator leaves it alone
//   s4  malicious while unchanged; the oracle errors on any changed bytes
//   s5  benign in genuine form (screened out)
struct Mock {
  std::vector<AttackSample> samples;
  std::map<std::string, std::string> by_fingerprint;  // fingerprint -> id
  std::map<std::string, std::string> genuine_digest;  // id -> digest
  std::set<std::size_t> grow_target_sizes;

  Mock() {
    std::set<std::size_t> sizes;
    for (std::uint64_t seed = 200; samples.size() < 5; ++seed) {
      Bytes b = malicious(seed);
      if (!sizes.insert(b.size()).second) continue;
      const std::string id = "s" + std::to_string(samples.size() + 1);
      by_fingerprint[pe::code_fingerprint(pe::parse(b))] = id;
      genuine_digest[id] = sha256_hex(b);
      if (id != "s3") grow_target_sizes.insert(b.size());
      samples.push_back({id, std::move(b)});
    }
  }

  DetectorPtr oracle() const {
    return std::make_shared<FnDetector>("oracle", [this](ByteView b) {
      const std::string id = by_fingerprint.at(pe::code_fingerprint(pe::parse(b)));
      const bool changed = sha256_hex(b) != genuine_digest.at(id);
      if (id == "s5") return 0.1;
      if (id == "s2" || !changed) return 0.9;
      if (id == "s4") throw Error(ErrorCode::Unreachable, "scanner offline");
      return 0.1;
    });
  }

  GeneratorSpec identity() const {
    GeneratorSpec s;
    s.config = generators::default_config(generators::GeneratorKind::Random);
    s.config.id = "id";
    s.target = std::make_shared<FnDetector>("never", [](ByteView) { return 0.1; });
    return s;
  }

  // Applies random actions until the file size leaves the genuine set.
  GeneratorSpec grow() const {
    GeneratorSpec s;
    s.config = generators::default_config(generators::GeneratorKind::Random);
    s.config.id = "grow";
    s.target = std::make_shared<FnDetector>(
        "sizes", [this](ByteView b) { return grow_target_sizes.count(b.size()) ? 0.9 : 0.1; });
    return s;
  }
};

}  // namespace chainae::testing
