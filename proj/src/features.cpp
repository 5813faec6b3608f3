#include "chainae/features.hpp"

#include <algorithm>
#include <cmath>

#include "chainae/pe.hpp"

namespace chainae::features {

namespace {

double entropy_of_counts(const std::array<std::uint64_t, 256>& counts, std::uint64_t total) {
  if (total == 0) return 0.0;
  double h = 0.0;
  const double inv = 1.0 / static_cast<double>(total);
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) * inv;
    h -= p * std::log2(p);
  }
  return h;
}

}  // namespace

double entropy(ByteView bytes) {
  std::array<std::uint64_t, 256> counts{};
  for (auto b : bytes) ++counts[b];
  return entropy_of_counts(counts, bytes.size());
}

FeatureVector extract(ByteView bytes) {
  FeatureVector f{};
  std::array<std::uint64_t, 256> counts{};
  for (auto b : bytes) ++counts[b];
  const double size = static_cast<double>(bytes.size());
  if (!bytes.empty())
    for (std::size_t i = 0; i < 256; ++i) f[kHistogram + i] = static_cast<double>(counts[i]) / size;
  f[kEntropy] = entropy_of_counts(counts, bytes.size());
  f[kLog2Size] = std::log2(std::max(size, 1.0));

  pe::Image img;
  try {
    img = pe::parse(bytes);
  } catch (const Error&) {
    return f;
  }

  f[kSectionCount] = static_cast<double>(img.sections.size());
  f[kOverlayRatio] = static_cast<double>(img.overlay.size()) / size;
  double sum = 0.0, mx = 0.0, exec = 0.0;
  for (const auto& s : img.sections) {
    const double h = entropy(s.data);
    sum += h;
    mx = std::max(mx, h);
    if (s.executable()) exec += static_cast<double>(s.data.size());
  }
  if (!img.sections.empty()) f[kMeanSectionEntropy] = sum / static_cast<double>(img.sections.size());
  f[kMaxSectionEntropy] = mx;
  f[kExecRatio] = exec / size;
  f[kTimestampBucket] = std::floor(static_cast<double>(img.coff.timestamp) / 31557600.0);
  f[kChecksumZero] = img.optional.checksum == 0 ? 1.0 : 0.0;

  Bytes dos(img.dos.raw.begin() + 2, img.dos.raw.begin() + pe::kLfanewOffset);
  dos.insert(dos.end(), img.dos.stub.begin(), img.dos.stub.end());
  f[kDosStubEntropy] = entropy(dos);
  return f;
}

}  // namespace chainae::features
