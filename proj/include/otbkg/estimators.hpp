#pragma once

// Background estimates in the signal region as weighted 3b SR samples:
//   FvT      v_j = odds(H_j^s)
//   OT-FvT   v_j = (n_c/m_c) sum_i odds(H_i^c) q_ij
//   OT-kNN   v_j = (n_c/m_c) sum_l sum_{i in I_k(G_l^c)} w_i(G_l^c) q_ij
// plus the ABCD normalization m_c n_s / n_c. Estimators never see SR 4b
// events; m_s is carried along only for bookkeeping.

#include <cmath>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "otbkg/emd.hpp"
#include "otbkg/error.hpp"
#include "otbkg/parallel.hpp"
#include "otbkg/ratio_net.hpp"
#include "otbkg/text.hpp"
#include "otbkg/transport.hpp"

namespace otbkg {

struct SampleCounts {
  std::size_t n_c = 0;  // 3b control region
  std::size_t n_s = 0;  // 3b signal region
  std::size_t m_c = 0;  // 4b control region
  std::size_t m_s = 0;  // 4b signal region (never used by estimators)
};

struct WeightedEstimate {
  std::string method;
  std::vector<std::size_t> atoms;  // indices into the SR 3b sample
  std::vector<double> weights;
  double total_mass = 0.0;  // sum of weights

  double sum() const { return std::accumulate(weights.begin(), weights.end(), 0.0); }
};

namespace detail {

inline WeightedEstimate make_estimate(std::string method, std::vector<double> v) {
  WeightedEstimate e;
  e.method = std::move(method);
  e.atoms.resize(v.size());
  std::iota(e.atoms.begin(), e.atoms.end(), std::size_t{0});
  e.weights = std::move(v);
  e.total_mass = e.sum();
  return e;
}

inline void check_counts_for(const Coupling& c, const SampleCounts& counts) {
  require(c.n_rows == counts.n_c, "estimate: coupling has " + std::to_string(c.n_rows) + " rows but n_c = " +
                                      std::to_string(counts.n_c));
  require(c.n_cols == counts.n_s, "estimate: coupling has " + std::to_string(c.n_cols) + " columns but n_s = " +
                                      std::to_string(counts.n_s));
  require(counts.m_c > 0, "estimate: m_c must be positive");
}

}  // namespace detail

/// FvT weights from classifier outputs psi (already clamped).
inline WeightedEstimate estimate_fvt_from_psi(std::span<const double> psi_signal3b) {
  std::vector<double> v(psi_signal3b.size());
  for (std::size_t j = 0; j < v.size(); ++j) v[j] = odds_from_psi(psi_signal3b[j]);
  return detail::make_estimate("fvt", std::move(v));
}

inline WeightedEstimate estimate_fvt(const RatioModel& model, std::span<const Event> signal3b, unsigned threads = 0) {
  const auto psi = predict_all(model, signal3b, threads);
  return estimate_fvt_from_psi(psi);
}

/// OT-FvT from the odds of every CR 3b event (rows of the coupling).
inline WeightedEstimate estimate_ot_fvt_from_odds(const Coupling& coupling, std::span<const double> control_odds,
                                                  const SampleCounts& counts) {
  detail::check_counts_for(coupling, counts);
  require(control_odds.size() == coupling.n_rows, "ot-fvt: one odds value per CR 3b event required");
  std::vector<double> v(coupling.n_cols, 0.0);
  for (const auto& e : coupling.entries) v[e.j] += control_odds[e.i] * e.q;
  const double pre = static_cast<double>(counts.n_c) / static_cast<double>(counts.m_c);
  for (auto& x : v) x *= pre;
  return detail::make_estimate("ot-fvt", std::move(v));
}

inline WeightedEstimate estimate_ot_fvt(const Coupling& coupling, const RatioModel& model,
                                        std::span<const Event> control3b, const SampleCounts& counts,
                                        unsigned threads = 0) {
  require(control3b.size() == coupling.n_rows, "ot-fvt: coupling rows do not match the CR 3b sample");
  const auto psi = predict_all(model, control3b, threads);
  std::vector<double> odds(psi.size());
  for (std::size_t i = 0; i < psi.size(); ++i) odds[i] = odds_from_psi(psi[i]);
  return estimate_ot_fvt_from_odds(coupling, odds, counts);
}

/// OT-kNN from precomputed neighbour sets, one per CR 4b event.
inline WeightedEstimate estimate_ot_knn_from_neighbours(const Coupling& coupling, std::span<const KnnWeights> neighbours,
                                                        const SampleCounts& counts) {
  detail::check_counts_for(coupling, counts);
  require(neighbours.size() == counts.m_c, "ot-knn: one neighbour set per CR 4b event required");
  std::vector<double> v(coupling.n_cols, 0.0);
  for (const auto& knn : neighbours)
    for (std::size_t t = 0; t < knn.indices.size(); ++t) {
      const std::size_t i = knn.indices[t];
      require(i < coupling.n_rows, "ot-knn: neighbour index outside coupling");
      if (knn.weights[t] == 0.0) continue;
      for (const auto& e : coupling.row(i)) v[e.j] += knn.weights[t] * e.q;
    }
  const double pre = static_cast<double>(counts.n_c) / static_cast<double>(counts.m_c);
  for (auto& x : v) x *= pre;
  return detail::make_estimate("ot-knn", std::move(v));
}

inline std::vector<KnnWeights> neighbour_sets(std::span<const Event> queries, std::span<const Event> reference,
                                              std::size_t k, const MetricParams& params, unsigned threads = 0) {
  std::vector<KnnWeights> out(queries.size());
  parallel_for(
      queries.size(), [&](std::size_t l) { out[l] = knn_weights(queries[l], reference, k, params); }, threads);
  return out;
}

inline WeightedEstimate estimate_ot_knn(const Coupling& coupling, std::span<const Event> control4b,
                                        std::span<const Event> control3b, std::size_t k, const MetricParams& params,
                                        const SampleCounts& counts, unsigned threads = 0) {
  require(k >= 1, "ot-knn: k must be at least 1");
  require(control3b.size() == coupling.n_rows, "ot-knn: coupling rows do not match the CR 3b sample");
  require(control4b.size() == counts.m_c, "ot-knn: CR 4b sample size does not match m_c");
  const auto nb = neighbour_sets(control4b, control3b, k, params, threads);
  return estimate_ot_knn_from_neighbours(coupling, nb, counts);
}

/// Unweighted SR 3b sample (the "raw 3b" baseline).
inline WeightedEstimate estimate_raw3b(std::size_t n_s) {
  return detail::make_estimate("raw3b", std::vector<double>(n_s, 1.0));
}

inline double abcd_mass(const SampleCounts& c) {
  if (c.n_c == 0) throw DataError("abcd_mass: n_c must be positive");
  return static_cast<double>(c.m_c) * static_cast<double>(c.n_s) / static_cast<double>(c.n_c);
}

/// Standard deviation of (abcd_mass - m_s) with all four counts Poisson:
/// Var(m_s) + abcd^2 (1/m_c + 1/n_s + 1/n_c), the last term by the delta
/// method. Empty counts contribute no relative term.
inline double abcd_sigma(const SampleCounts& c) {
  const double a = abcd_mass(c);
  double rel = 0.0;
  for (std::size_t n : {c.m_c, c.n_s, c.n_c})
    if (n > 0) rel += 1.0 / static_cast<double>(n);
  return std::sqrt(static_cast<double>(c.m_s) + a * a * rel);
}

/// Rescales so the weights sum to mass.
inline WeightedEstimate normalize(WeightedEstimate est, double mass) {
  require(std::isfinite(mass) && mass >= 0.0, "normalize: mass must be finite and nonnegative");
  const double s = est.sum();
  if (!(s > 0.0)) throw NumericalError("normalize: estimate weights are all zero");
  for (auto& w : est.weights) w *= mass / s;
  est.total_mass = mass;
  return est;
}

// Estimate file: '#' comment header (method, mass, counts, config hash),
// then "atom_index,weight" and one row per atom.
inline void write_estimate(std::ostream& out, const WeightedEstimate& est, const SampleCounts& counts,
                           const std::string& config_hash) {
  out << "# method=" << est.method << '\n';
  out << "# mass=" << format_double(est.total_mass) << '\n';
  out << "# n_c=" << counts.n_c << " n_s=" << counts.n_s << " m_c=" << counts.m_c << " m_s=" << counts.m_s << '\n';
  out << "# config_hash=" << config_hash << '\n';
  out << "atom_index,weight\n";
  for (std::size_t t = 0; t < est.atoms.size(); ++t) out << est.atoms[t] << ',' << format_double(est.weights[t]) << '\n';
}

inline void write_estimate(const std::string& path, const WeightedEstimate& est, const SampleCounts& counts,
                           const std::string& config_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write estimate file " + path);
  write_estimate(out, est, counts, config_hash);
}

struct EstimateFile {
  WeightedEstimate estimate;
  SampleCounts counts;
  std::string config_hash;
};

inline EstimateFile read_estimate(std::istream& in, const std::string& name = "<stream>") {
  EstimateFile f;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  double declared_mass = -1.0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = name + ":" + std::to_string(lineno);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!header && !line.empty() && line[0] == '#') {
      std::istringstream ss(line.substr(1));
      std::string tok;
      while (ss >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "method") f.estimate.method = val;
        else if (key == "mass") declared_mass = parse_double(val, where);
        else if (key == "n_c") f.counts.n_c = parse_index(val, where);
        else if (key == "n_s") f.counts.n_s = parse_index(val, where);
        else if (key == "m_c") f.counts.m_c = parse_index(val, where);
        else if (key == "m_s") f.counts.m_s = parse_index(val, where);
        else if (key == "config_hash") f.config_hash = val;
      }
      continue;
    }
    if (!header) {
      if (line != "atom_index,weight") throw DataError(where + ": expected header 'atom_index,weight'");
      header = true;
      continue;
    }
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError(where + ": expected 'atom_index,weight'");
    const std::size_t idx = parse_index(std::string_view(line).substr(0, comma), where);
    const double w = parse_double(std::string_view(line).substr(comma + 1), where);
    if (!(w >= 0.0) || !std::isfinite(w)) throw DataError(where + ": weight must be finite and nonnegative");
    if (!f.estimate.atoms.empty() && idx <= f.estimate.atoms.back())
      throw DataError(where + ": atom indices must be strictly increasing");
    f.estimate.atoms.push_back(idx);
    f.estimate.weights.push_back(w);
  }
  if (!header) throw DataError(name + ": missing 'atom_index,weight' header");
  f.estimate.total_mass = f.estimate.sum();
  if (declared_mass >= 0.0 && std::fabs(f.estimate.total_mass - declared_mass) > 1e-9 * std::max(1.0, declared_mass))
    throw DataError(name + ": weights sum to " + format_double(f.estimate.total_mass) + " but header declares mass " +
                    format_double(declared_mass));
  return f;
}

inline EstimateFile read_estimate(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open estimate file " + path);
  return read_estimate(in, path);
}

}  // namespace otbkg
