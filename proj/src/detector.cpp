#include "chainae/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "chainae/rng.hpp"

namespace chainae::detectors {

AverageDetector::AverageDetector(std::string id, std::vector<DetectorPtr> members, double threshold)
    : id_(std::move(id)), members_(std::move(members)), threshold_(threshold) {
  if (members_.empty()) throw Error(ErrorCode::ConfigError, "average detector needs at least one member");
}

double AverageDetector::mean_score(ByteView bytes) const {
  double sum = 0.0;
  for (const auto& m : members_) sum += m->score(bytes).score;
  return sum / static_cast<double>(members_.size());
}

Verdict AverageDetector::score(ByteView bytes) const { return make_verdict(mean_score(bytes), threshold_, id_); }

DataSplit split_examples(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, {hash_tag("split")}));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  const std::size_t n_val = n * 15 / 100;
  const std::size_t n_test = n * 15 / 100;
  DataSplit s;
  s.validation.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), idx.end());
  for (auto* part : {&s.train, &s.validation, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

double balanced_accuracy_at(std::span<const double> scores, std::span<const std::uint8_t> labels, double threshold) {
  std::size_t tp = 0, tn = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i]) {
      ++pos;
      tp += pred;
    } else {
      ++neg;
      tn += !pred;
    }
  }
  const double tpr = pos ? static_cast<double>(tp) / static_cast<double>(pos) : 0.0;
  const double tnr = neg ? static_cast<double>(tn) / static_cast<double>(neg) : 0.0;
  return 0.5 * (tpr + tnr);
}

double accuracy_at(std::span<const double> scores, std::span<const std::uint8_t> labels, double threshold) {
  if (scores.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) correct += (scores[i] >= threshold) == (labels[i] != 0);
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

double best_balanced_threshold(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  if (sorted.empty()) return 0.5;
  std::vector<double> candidates;
  candidates.push_back(sorted.front());
  for (std::size_t i = 1; i < sorted.size(); ++i) candidates.push_back(0.5 * (sorted[i - 1] + sorted[i]));
  candidates.push_back(std::nextafter(sorted.back(), 2.0));
  double best = candidates.front();
  double best_acc = -1.0;
  for (double t : candidates) {
    const double acc = balanced_accuracy_at(scores, labels, t);
    if (acc > best_acc) {
      best_acc = acc;
      best = t;
    }
  }
  return best;
}

}  // namespace chainae::detectors
