#pragma once

// Binned Poisson likelihood for a signal strength mu, with expected counts
// B_j + mu S_j, the asymptotic likelihood-ratio test of mu = 0, plus the
// histogram and ratio-plot helpers used for validation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "otbkg/error.hpp"
#include "otbkg/estimators.hpp"
#include "otbkg/event.hpp"
#include "otbkg/ratio_net.hpp"
#include "otbkg/roc.hpp"

namespace otbkg {

struct Histogram {
  std::vector<double> edges;  // J + 1, strictly increasing
  std::vector<double> content;
  std::vector<double> sumw2;
  double underflow = 0.0, overflow = 0.0;
  std::string label;

  std::size_t bins() const { return content.size(); }

  void validate() const {
    require(edges.size() >= 2, "histogram: need at least one bin");
    require(content.size() + 1 == edges.size() && sumw2.size() == content.size(),
            "histogram: edges/content/sumw2 lengths are inconsistent");
    for (std::size_t k = 0; k + 1 < edges.size(); ++k)
      require(edges[k] < edges[k + 1], "histogram: edges must be strictly increasing");
    for (std::size_t k = 0; k < content.size(); ++k)
      require(content[k] >= 0.0 && sumw2[k] >= 0.0, "histogram: content and sumw2 must be nonnegative");
  }

  double total() const {
    double s = 0.0;
    for (double c : content) s += c;
    return s;
  }
};

inline std::vector<double> uniform_edges(std::size_t bins, double lo, double hi) {
  require(bins >= 1 && lo < hi, "uniform_edges: need bins >= 1 and lo < hi");
  std::vector<double> e(bins + 1);
  for (std::size_t k = 0; k <= bins; ++k) e[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(bins);
  e.back() = hi;
  return e;
}

inline Histogram empty_histogram(std::vector<double> edges, std::string label = {}) {
  Histogram h;
  h.content.assign(edges.size() > 0 ? edges.size() - 1 : 0, 0.0);
  h.sumw2 = h.content;
  h.edges = std::move(edges);
  h.label = std::move(label);
  h.validate();
  return h;
}

/// Bins [e_k, e_{k+1}), the last one closed on the right.
inline void fill(Histogram& h, double x, double w) {
  if (std::isnan(x)) throw DataError("histogram: NaN score");
  if (x < h.edges.front()) {
    h.underflow += w;
    return;
  }
  if (x > h.edges.back()) {
    h.overflow += w;
    return;
  }
  auto it = std::upper_bound(h.edges.begin(), h.edges.end(), x);
  std::size_t k = static_cast<std::size_t>(it - h.edges.begin());
  k = k == 0 ? 0 : k - 1;
  if (k >= h.bins()) k = h.bins() - 1;  // x == last edge
  h.content[k] += w;
  h.sumw2[k] += w * w;
}

inline Histogram bin_values(std::span<const double> values, std::span<const double> weights, std::vector<double> edges,
                            std::string label = {}) {
  require(values.size() == weights.size(), "bin_values: values and weights differ in length");
  Histogram h = empty_histogram(std::move(edges), std::move(label));
  for (std::size_t i = 0; i < values.size(); ++i) fill(h, values[i], weights[i]);
  return h;
}

inline Histogram bin_events(std::span<const Event> events, std::span<const double> weights,
                            const std::function<double(const Event&)>& score_fn, std::vector<double> edges,
                            std::string label = {}) {
  require(events.size() == weights.size(), "bin_events: events and weights differ in length");
  Histogram h = empty_histogram(std::move(edges), std::move(label));
  for (std::size_t i = 0; i < events.size(); ++i) fill(h, score_fn(events[i]), weights[i]);
  return h;
}

namespace detail {

inline void check_same_binning(const Histogram& a, const Histogram& b, const char* what) {
  a.validate();
  b.validate();
  if (a.edges != b.edges) throw DataError(std::string(what) + ": histograms have different bin edges");
}

}  // namespace detail

/// sum_j D_j ln(B_j + mu S_j) - (B_j + mu S_j) - ln Gamma(D_j + 1).
inline double binned_loglik(double mu, const Histogram& background, const Histogram& signal, const Histogram& data) {
  detail::check_same_binning(background, signal, "binned_loglik");
  detail::check_same_binning(background, data, "binned_loglik");
  double l = 0.0;
  for (std::size_t j = 0; j < data.bins(); ++j) {
    const double nu = background.content[j] + mu * signal.content[j];
    const double d = data.content[j];
    if (d > 0.0) {
      if (!(nu > 0.0))
        throw DataError("binned_loglik: bin " + std::to_string(j) + " has data but nonpositive expected content");
      l += d * std::log(nu);
    }
    l -= nu + std::lgamma(d + 1.0);
  }
  return l;
}

struct SignalFit {
  double mu_hat = 0.0;
  double sigma_mu = 0.0;  // from the curvature at mu_hat (infinite if flat)
  double q0 = 0.0;
  double z = 0.0;
  double logl0 = 0.0;
  double logl_hat = 0.0;
};

/// Maximizes the (concave) likelihood over mu >= 0.
inline SignalFit fit_mu(const Histogram& background, const Histogram& signal, const Histogram& data) {
  detail::check_same_binning(background, signal, "fit_mu");
  detail::check_same_binning(background, data, "fit_mu");
  const double s_tot = signal.total();
  if (!(s_tot > 0.0)) throw DataError("fit_mu: signal template is empty");
  const std::size_t J = data.bins();
  auto grad = [&](double mu) {
    double g = -s_tot;
    for (std::size_t j = 0; j < J; ++j) {
      const double d = data.content[j], s = signal.content[j];
      if (d > 0.0 && s != 0.0) g += d * s / (background.content[j] + mu * s);
    }
    return g;
  };
  auto curv = [&](double mu) {
    double h = 0.0;
    for (std::size_t j = 0; j < J; ++j) {
      const double d = data.content[j], s = signal.content[j];
      if (d > 0.0 && s != 0.0) {
        const double nu = background.content[j] + mu * s;
        h -= d * s * s / (nu * nu);
      }
    }
    return h;
  };
  // a bin with data, no background and signal makes the gradient at 0 infinite
  bool forced_positive = false;
  for (std::size_t j = 0; j < J; ++j)
    if (data.content[j] > 0.0 && !(background.content[j] > 0.0)) {
      if (!(signal.content[j] > 0.0))
        throw DataError("fit_mu: bin " + std::to_string(j) + " has data but no expected content");
      forced_positive = true;
    }

  SignalFit f;
  const double tol = 1e-10 * (1.0 + s_tot);
  double mu = 0.0;
  if (forced_positive || grad(0.0) > tol) {
    double lo = 0.0, hi = 1.0;
    while (grad(hi) > 0.0) {
      lo = hi;
      hi *= 2.0;
      if (!std::isfinite(hi) || hi > 1e300) throw NumericalError("fit_mu: could not bracket the maximum");
    }
    mu = 0.5 * (lo + hi);
    for (int it = 0; it < 500; ++it) {
      const double g = grad(mu);
      if (!std::isfinite(g)) throw NumericalError("fit_mu: non-finite likelihood gradient");
      if (std::fabs(g) <= tol) break;
      if (g > 0.0) lo = mu;
      else hi = mu;
      const double h = curv(mu);
      double next = h < 0.0 ? mu - g / h : 0.5 * (lo + hi);
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (next == mu) break;
      mu = next;
    }
  }
  f.mu_hat = mu;
  f.logl_hat = binned_loglik(mu, background, signal, data);
  if (!std::isfinite(f.logl_hat)) throw NumericalError("fit_mu: non-finite likelihood");
  if (forced_positive) {
    // data where only signal is expected: mu = 0 is excluded outright
    f.logl0 = -std::numeric_limits<double>::infinity();
    f.q0 = std::numeric_limits<double>::infinity();
  } else {
    f.logl0 = binned_loglik(0.0, background, signal, data);
    if (!std::isfinite(f.logl0)) throw NumericalError("fit_mu: non-finite likelihood");
    f.q0 = std::max(0.0, 2.0 * (f.logl_hat - f.logl0));
  }
  f.z = std::sqrt(f.q0);
  const double h = curv(mu);
  f.sigma_mu = h < 0.0 ? 1.0 / std::sqrt(-h) : std::numeric_limits<double>::infinity();
  return f;
}

struct RatioRow {
  double ratio = 0.0;  // estimate / truth
  double bar = 0.0;    // sqrt(estimate) / truth
  double band = 0.0;   // sqrt(1 / truth)
  bool empty_truth = false;
};

inline std::vector<RatioRow> ratio_plot_data(const Histogram& estimate, const Histogram& truth) {
  detail::check_same_binning(estimate, truth, "ratio_plot_data");
  std::vector<RatioRow> rows(truth.bins());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const double t = truth.content[k], e = estimate.content[k];
    if (!(t > 0.0)) {
      rows[k].empty_truth = true;
      rows[k].ratio = rows[k].bar = rows[k].band = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    rows[k] = {e / t, std::sqrt(e) / t, std::sqrt(1.0 / t), false};
  }
  return rows;
}

struct ClosureOptions {
  double holdout_fraction = 0.3;
  int bootstrap_replications = 1000;
  unsigned threads = 0;
};

struct ClosureResult {
  AucInterval auc;
  RatioModel model;
};

/// Trains a classifier to separate the estimate (atoms weighted by v_j,
/// label 0) from the truth sample (label 1) and reports the held-out AUC.
/// Both classes are rescaled to equal total weight for training and scoring.
inline ClosureResult closure_auc(const WeightedEstimate& estimate, std::span<const Event> atoms,
                                 std::span<const Event> truth4b, const NetConfig& netcfg, std::uint64_t seed,
                                 const ClosureOptions& opt = {}) {
  require(!truth4b.empty(), "closure_auc: truth sample is empty");
  require(estimate.atoms.size() == estimate.weights.size(), "closure_auc: malformed estimate");
  require(opt.holdout_fraction > 0.0 && opt.holdout_fraction < 1.0, "closure_auc: holdout fraction must be in (0, 1)");
  std::vector<Event> e0;
  std::vector<double> w0;
  for (std::size_t t = 0; t < estimate.atoms.size(); ++t) {
    require(estimate.atoms[t] < atoms.size(), "closure_auc: estimate atom index outside the atom sample");
    if (estimate.weights[t] <= 0.0) continue;
    e0.push_back(atoms[estimate.atoms[t]]);
    w0.push_back(estimate.weights[t]);
  }
  require(!e0.empty(), "closure_auc: estimate has no positive weights");

  std::mt19937_64 rng(seed);
  auto split = [&](std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(opt.holdout_fraction * n)));
    require(n_test < n, "closure_auc: sample too small to hold out events");
    std::vector<std::size_t> test(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
    std::sort(test.begin(), test.end());
    std::sort(train.begin(), train.end());
    return std::pair{train, test};
  };
  const auto [tr0, te0] = split(e0.size());
  const auto [tr1, te1] = split(truth4b.size());

  auto gather = [](const auto& src, const std::vector<std::size_t>& idx) {
    std::vector<std::decay_t<decltype(src[0])>> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(src[i]);
    return out;
  };
  const auto x0 = gather(e0, tr0);
  auto v0 = gather(w0, tr0);
  std::vector<Event> x1;
  for (auto i : tr1) x1.push_back(truth4b[i]);
  // balance: class 0 weights sum to the class 1 count, mean weight 1 overall
  const double s0 = std::accumulate(v0.begin(), v0.end(), 0.0);
  if (!(s0 > 0.0)) throw DataError("closure_auc: training split has no estimate weight");
  const double n1 = static_cast<double>(x1.size());
  for (auto& w : v0) w *= n1 / s0;
  const std::vector<double> v1(x1.size(), 1.0);

  ClosureResult res;
  res.model = train(build_model(netcfg, seed), x0, x1, v0, v1);

  const auto t0 = gather(e0, te0);
  const auto tw0 = gather(w0, te0);
  std::vector<Event> t1;
  for (auto i : te1) t1.push_back(truth4b[i]);
  const auto p0 = predict_all(res.model, t0, opt.threads);
  const auto p1 = predict_all(res.model, t1, opt.threads);
  ScoredSample s;
  const double st0 = std::accumulate(tw0.begin(), tw0.end(), 0.0);
  for (std::size_t i = 0; i < p0.size(); ++i) {
    s.scores.push_back(p0[i]);
    s.labels.push_back(0);
    s.weights.push_back(tw0[i] * static_cast<double>(t1.size()) / st0);
  }
  for (double p : p1) {
    s.scores.push_back(p);
    s.labels.push_back(1);
    s.weights.push_back(1.0);
  }
  res.auc = bootstrap_auc(s, opt.bootstrap_replications, seed ^ 0xb5ad4eceda1ce2a9ULL);
  return res;
}

}  // namespace otbkg
