#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "otbkg/error.hpp"

namespace otbkg {

/// Classifier scores with 0/1 labels and nonnegative weights.
struct ScoredSample {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<double> weights;

  void validate() const {
    require(scores.size() == labels.size() && scores.size() == weights.size(),
            "scored sample: length mismatch");
  }
};

/// Weighted probability that a class-1 score exceeds a class-0 score, ties
/// counted one half.
inline double auc(std::span<const double> scores, std::span<const int> labels,
                  std::span<const double> weights) {
  require(scores.size() == labels.size() && scores.size() == weights.size(), "auc: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double w0 = 0.0, w1 = 0.0, area = 0.0;
  for (std::size_t k = 0; k < order.size();) {
    std::size_t end = k;
    double g0 = 0.0, g1 = 0.0;
    while (end < order.size() && scores[order[end]] == scores[order[k]]) {
      const std::size_t i = order[end];
      if (labels[i] == 1) g1 += weights[i];
      else g0 += weights[i];
      ++end;
    }
    area += g1 * (w0 + 0.5 * g0);
    w0 += g0;
    w1 += g1;
    k = end;
  }
  if (!(w0 > 0.0) || !(w1 > 0.0)) throw DataError("auc: both classes need positive weight");
  return area / (w0 * w1);
}

inline double auc(const ScoredSample& s) {
  s.validate();
  return auc(s.scores, s.labels, s.weights);
}

struct AucInterval {
  double point = 0.0, lo = 0.0, hi = 0.0;
  int replications = 0;  // resamples actually used
  int skipped = 0;       // resamples with a single class
};

/// Percentile 95% interval from resampling (score, label, weight) triples.
inline AucInterval bootstrap_auc(const ScoredSample& s, int replications, std::uint64_t seed) {
  s.validate();
  require(replications >= 1, "bootstrap_auc: need at least one replication");
  AucInterval out;
  out.point = auc(s);
  const std::size_t n = s.scores.size();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> values;
  values.reserve(replications);
  std::vector<double> sc(n), w(n);
  std::vector<int> lb(n);
  for (int r = 0; r < replications; ++r) {
    double w0 = 0.0, w1 = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = pick(rng);
      sc[k] = s.scores[i];
      lb[k] = s.labels[i];
      w[k] = s.weights[i];
      (lb[k] == 1 ? w1 : w0) += w[k];
    }
    if (!(w0 > 0.0) || !(w1 > 0.0)) {
      ++out.skipped;
      continue;
    }
    values.push_back(auc(sc, lb, w));
  }
  if (values.empty()) throw NumericalError("bootstrap_auc: every resample had a single class");
  std::sort(values.begin(), values.end());
  auto quantile = [&](double p) {
    const double h = p * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  out.lo = quantile(0.025);
  out.hi = quantile(0.975);
  out.replications = static_cast<int>(values.size());
  return out;
}

}  // namespace otbkg
