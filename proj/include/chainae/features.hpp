#pragma once

#include <array>

#include "chainae/common.hpp"

namespace chainae::features {

inline constexpr std::size_t kFeatureCount = 270;

/// Layout:
///   [0, 256)  normalized byte histogram
///   256 whole-file entropy (bits/byte)      257 log2 file size
///   258 section count                       259 overlay bytes / file size
///   260 mean section entropy                261 max section entropy
///   262 executable raw bytes / file size    263 timestamp bucket (years since 1970)
///   264 checksum-is-zero flag               265 DOS header+stub entropy
///   [266, 270) reserved, always zero
enum Index : std::size_t {
  kHistogram = 0,
  kEntropy = 256,
  kLog2Size = 257,
  kSectionCount = 258,
  kOverlayRatio = 259,
  kMeanSectionEntropy = 260,
  kMaxSectionEntropy = 261,
  kExecRatio = 262,
  kTimestampBucket = 263,
  kChecksumZero = 264,
  kDosStubEntropy = 265,
  kReserved = 266,
};

using FeatureVector = std::array<double, kFeatureCount>;

/// Never throws. Files that do not parse get histogram, entropy and size only.
FeatureVector extract(ByteView bytes);

/// Shannon entropy in bits per byte; 0 for empty input.
double entropy(ByteView bytes);

}  // namespace chainae::features
