#pragma once

// Sample-level optimal transport: exact couplings between event samples,
// conditional rows, and the nearest-neighbour extension to new events.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "otbkg/emd.hpp"
#include "otbkg/error.hpp"
#include "otbkg/matrix.hpp"
#include "otbkg/network_simplex.hpp"
#include "otbkg/text.hpp"

namespace otbkg {

struct CouplingEntry {
  std::size_t i = 0, j = 0;
  double q = 0.0;
};

/// Sparse transport plan between n_rows sources and n_cols targets.
struct Coupling {
  std::size_t n_rows = 0, n_cols = 0;
  std::vector<CouplingEntry> entries;  // q > 0, sorted by (i, j)
  double objective = 0.0;
  // Dual solution from the solver (empty for couplings read from disk).
  std::vector<double> row_potential, col_potential;

  std::span<const CouplingEntry> row(std::size_t i) const {
    auto lo = std::lower_bound(entries.begin(), entries.end(), i,
                               [](const CouplingEntry& e, std::size_t r) { return e.i < r; });
    auto hi = std::upper_bound(lo, entries.end(), i,
                               [](std::size_t r, const CouplingEntry& e) { return r < e.i; });
    return {entries.data() + (lo - entries.begin()), static_cast<std::size_t>(hi - lo)};
  }

  std::vector<double> row_sums() const {
    std::vector<double> s(n_rows, 0.0);
    for (const auto& e : entries) s[e.i] += e.q;
    return s;
  }
  std::vector<double> col_sums() const {
    std::vector<double> s(n_cols, 0.0);
    for (const auto& e : entries) s[e.j] += e.q;
    return s;
  }
};

struct TargetWeight {
  std::size_t j = 0;
  double w = 0.0;
};

struct ConditionalRow {
  std::size_t source = 0;
  std::vector<TargetWeight> targets;
};

struct KnnWeights {
  std::vector<std::size_t> indices;  // nearest first, ties by index
  std::vector<double> distances;
  std::vector<double> weights;
};

namespace detail {

template <typename Flow>
Coupling finish_coupling(const BipartiteNetworkSimplex<Flow>& ns, const Matrix<double>& cost,
                         double unit) {
  Coupling c;
  c.n_rows = cost.rows();
  c.n_cols = cost.cols();
  for (const auto& a : ns.support()) c.entries.push_back({a.i, a.j, static_cast<double>(a.flow) * unit});
  std::sort(c.entries.begin(), c.entries.end(), [](const CouplingEntry& x, const CouplingEntry& y) {
    return x.i != y.i ? x.i < y.i : x.j < y.j;
  });
  double obj = 0.0;
  for (const auto& e : c.entries) obj += e.q * cost(e.i, e.j);
  c.objective = obj;
  c.row_potential.resize(c.n_rows);
  c.col_potential.resize(c.n_cols);
  for (std::size_t i = 0; i < c.n_rows; ++i) c.row_potential[i] = ns.row_potential(i);
  for (std::size_t j = 0; j < c.n_cols; ++j) c.col_potential[j] = ns.col_potential(j);
  return c;
}

inline void check_marginals(const Coupling& c, std::span<const double> rows, std::span<const double> cols,
                            double tol) {
  const auto rs = c.row_sums();
  const auto cs = c.col_sums();
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (std::fabs(rs[i] - rows[i]) > tol) throw NumericalError("coupling row marginal violated");
  for (std::size_t j = 0; j < cols.size(); ++j)
    if (std::fabs(cs[j] - cols[j]) > tol) throw NumericalError("coupling column marginal violated");
}

}  // namespace detail

/// Exact transportation LP: minimize sum q_ij cost_ij with row sums
/// row_masses and column sums col_masses.
inline Coupling solve_kantorovich(const Matrix<double>& cost, std::span<const double> row_masses,
                                  std::span<const double> col_masses) {
  require(cost.rows() == row_masses.size() && cost.cols() == col_masses.size(),
          "solve_kantorovich: cost shape does not match masses");
  require(!row_masses.empty() && !col_masses.empty(), "solve_kantorovich: empty marginals");
  double sr = 0.0, sc = 0.0;
  for (double a : row_masses) {
    if (!(a >= 0.0) || !std::isfinite(a)) throw DataError("solve_kantorovich: masses must be nonnegative");
    sr += a;
  }
  for (double b : col_masses) {
    if (!(b >= 0.0) || !std::isfinite(b)) throw DataError("solve_kantorovich: masses must be nonnegative");
    sc += b;
  }
  if (std::fabs(sr - sc) > 1e-12 * std::max(1.0, sr))
    throw DataError("solve_kantorovich: row and column masses are unbalanced");
  detail::BipartiteNetworkSimplex<double> ns(cost, row_masses, col_masses);
  ns.run();
  Coupling c = detail::finish_coupling(ns, cost, 1.0);
  detail::check_marginals(c, row_masses, col_masses, 1e-9 * std::max(1.0, sr));
  return c;
}

/// Uniform marginals 1/n_rows and 1/n_cols, solved in integer units of
/// 1/(n_rows*n_cols) so the marginals hold exactly.
inline Coupling uniform_coupling(const Matrix<double>& cost) {
  const std::size_t n = cost.rows(), m = cost.cols();
  require(n > 0 && m > 0, "uniform_coupling: empty cost matrix");
  std::vector<std::int64_t> supply(n, static_cast<std::int64_t>(m));
  std::vector<std::int64_t> demand(m, static_cast<std::int64_t>(n));
  detail::BipartiteNetworkSimplex<std::int64_t> ns(cost, supply, demand);
  ns.run();
  Coupling c = detail::finish_coupling(ns, cost, 1.0 / (static_cast<double>(n) * static_cast<double>(m)));
  std::vector<double> rows(n, 1.0 / static_cast<double>(n)), cols(m, 1.0 / static_cast<double>(m));
  detail::check_marginals(c, rows, cols, 1e-9);
  return c;
}

/// Coupling between two event samples under the event metric, uniform
/// marginals. With weighted_marginals the masses follow the event weights
/// instead (an extension; the estimators assume uniform marginals).
inline Coupling fit_coupling(std::span<const Event> control3b, std::span<const Event> signal3b,
                             const MetricParams& params, unsigned threads = 0,
                             bool weighted_marginals = false) {
  require(!control3b.empty() && !signal3b.empty(), "fit_coupling: empty sample");
  const auto cost = distance_matrix(control3b, signal3b, params, threads);
  if (!weighted_marginals) return uniform_coupling(cost);
  auto masses = [](std::span<const Event> evs) {
    std::vector<double> w;
    double total = 0.0;
    for (const auto& e : evs) total += e.weight;
    if (!(total > 0.0)) throw DataError("fit_coupling: weighted marginals need positive total weight");
    for (const auto& e : evs) w.push_back(e.weight / total);
    return w;
  };
  auto rows = masses(control3b), cols = masses(signal3b);
  // rebalance rounding so both sides sum to the same value
  const double sr = std::accumulate(rows.begin(), rows.end(), 0.0);
  const double sc = std::accumulate(cols.begin(), cols.end(), 0.0);
  for (auto& b : cols) b *= sr / sc;
  return solve_kantorovich(cost, rows, cols);
}

/// Largest violation of dual feasibility or complementary slackness.
inline double duality_residual(const Coupling& c, const Matrix<double>& cost) {
  require(c.row_potential.size() == c.n_rows && c.col_potential.size() == c.n_cols,
          "duality_residual: coupling carries no potentials");
  double worst = 0.0;
  for (std::size_t i = 0; i < c.n_rows; ++i)
    for (std::size_t j = 0; j < c.n_cols; ++j)
      worst = std::max(worst, -(cost(i, j) - c.row_potential[i] - c.col_potential[j]));
  for (const auto& e : c.entries)
    worst = std::max(worst, std::fabs(cost(e.i, e.j) - c.row_potential[e.i] - c.col_potential[e.j]));
  return worst;
}

/// Row i of the coupling renormalized to a probability vector.
inline ConditionalRow conditional(const Coupling& c, std::size_t i) {
  require(i < c.n_rows, "conditional: row index out of range");
  ConditionalRow out{i, {}};
  double total = 0.0;
  for (const auto& e : c.row(i)) total += e.q;
  if (!(total > 0.0)) throw NumericalError("conditional: row carries no mass");
  for (const auto& e : c.row(i)) out.targets.push_back({e.j, e.q / total});
  return out;
}

/// Inverse-distance weights over the k nearest entries of `distances`
/// (ties by index). Zero distances share the weight uniformly.
inline KnnWeights knn_from_distances(std::span<const double> distances, std::size_t k) {
  require(k >= 1, "knn: k must be at least 1");
  require(!distances.empty(), "knn: empty reference sample");
  std::vector<std::size_t> idx(distances.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t kk = std::min(k, distances.size());
  auto closer = [&](std::size_t a, std::size_t b) {
    return distances[a] != distances[b] ? distances[a] < distances[b] : a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(), closer);
  KnnWeights out;
  out.indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk));
  for (auto i : out.indices) out.distances.push_back(distances[i]);
  std::size_t zeros = 0;
  for (double d : out.distances) zeros += d == 0.0;
  out.weights.resize(kk);
  if (zeros > 0) {
    for (std::size_t t = 0; t < kk; ++t) out.weights[t] = out.distances[t] == 0.0 ? 1.0 / static_cast<double>(zeros) : 0.0;
  } else {
    double total = 0.0;
    for (double d : out.distances) total += 1.0 / d;
    for (std::size_t t = 0; t < kk; ++t) out.weights[t] = (1.0 / out.distances[t]) / total;
  }
  return out;
}

/// kNN weights of event g among `reference` under the event metric. Exact:
/// candidates whose rotation-free lower bound cannot enter the current top k
/// are skipped without computing their distance.
inline KnnWeights knn_weights(const Event& g, std::span<const Event> reference, std::size_t k,
                              const MetricParams& params) {
  require(k >= 1, "knn: k must be at least 1");
  require(!reference.empty(), "knn: empty reference sample");
  params.validate();
  const std::size_t kk = std::min(k, reference.size());
  // max-heap of (distance, index) holding the current best kk
  std::vector<std::pair<double, std::size_t>> heap;
  heap.reserve(kk + 1);
  for (std::size_t i = 0; i < reference.size(); ++i) {
    if (heap.size() == kk && emd_lower_bound(g, reference[i], params) >= heap.front().first) continue;
    const double d = emd(g, reference[i], params);
    const std::pair<double, std::size_t> item{d, i};
    if (heap.size() < kk) {
      heap.push_back(item);
      std::push_heap(heap.begin(), heap.end());
    } else if (item < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = item;
      std::push_heap(heap.begin(), heap.end());
    }
  }
  std::sort(heap.begin(), heap.end());
  std::vector<double> d(heap.size());
  for (std::size_t t = 0; t < heap.size(); ++t) d[t] = heap[t].first;
  KnnWeights w = knn_from_distances(d, kk);  // already ordered, so positions map back
  for (auto& i : w.indices) i = heap[i].second;
  return w;
}

/// Mixture sum_i w_i * conditional(c, i) as a sparse probability vector.
inline std::vector<TargetWeight> extend_conditional(const Coupling& c, const KnnWeights& knn) {
  std::vector<TargetWeight> acc;
  for (std::size_t t = 0; t < knn.indices.size(); ++t) {
    if (knn.weights[t] == 0.0) continue;
    require(knn.indices[t] < c.n_rows, "extend_conditional: neighbour index outside coupling");
    for (const auto& tw : conditional(c, knn.indices[t]).targets) acc.push_back({tw.j, knn.weights[t] * tw.w});
  }
  std::sort(acc.begin(), acc.end(), [](const TargetWeight& a, const TargetWeight& b) { return a.j < b.j; });
  std::vector<TargetWeight> out;
  for (const auto& tw : acc) {
    if (!out.empty() && out.back().j == tw.j) out.back().w += tw.w;
    else out.push_back(tw);
  }
  return out;
}

/// Exhaustive minimum over permutations of the mean assignment cost; the
/// optimal value of the uniform square transport problem. n <= 6.
inline double brute_force_ot(const Matrix<double>& cost) {
  const std::size_t n = cost.rows();
  require(n == cost.cols(), "brute_force_ot: square matrix required");
  require(n >= 1 && n <= 6, "brute_force_ot: size must be between 1 and 6");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += cost(i, perm[i]);
    best = std::min(best, s / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Text format: "n_rows n_cols objective", then one "i j q" line per entry,
// sorted by (i, j).
inline void write_coupling(std::ostream& out, const Coupling& c) {
  out << c.n_rows << ' ' << c.n_cols << ' ' << format_double(c.objective) << '\n';
  for (const auto& e : c.entries) out << e.i << ' ' << e.j << ' ' << format_double(e.q) << '\n';
}

inline void write_coupling(const std::string& path, const Coupling& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write coupling file " + path);
  write_coupling(out, c);
}

inline Coupling read_coupling(std::istream& in, const std::string& name = "<stream>") {
  Coupling c;
  std::string line;
  if (!std::getline(in, line)) throw DataError(name + ": empty coupling file");
  auto fields = [](const std::string& l) {
    std::vector<std::string> f;
    std::istringstream ss(l);
    std::string tok;
    while (ss >> tok) f.push_back(tok);
    return f;
  };
  auto head = fields(line);
  if (head.size() != 3) throw DataError(name + ":1: expected 'n_rows n_cols objective'");
  c.n_rows = parse_index(head[0], name + ":1");
  c.n_cols = parse_index(head[1], name + ":1");
  c.objective = parse_double(head[2], name + ":1");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    auto f = fields(line);
    if (f.size() != 3) throw DataError(where + ": expected 'i j q'");
    CouplingEntry e{parse_index(f[0], where), parse_index(f[1], where), parse_double(f[2], where)};
    if (e.i >= c.n_rows || e.j >= c.n_cols) throw DataError(where + ": index out of range");
    if (!(e.q > 0.0)) throw DataError(where + ": mass must be positive");
    if (!c.entries.empty()) {
      const auto& p = c.entries.back();
      if (p.i > e.i || (p.i == e.i && p.j >= e.j)) throw DataError(where + ": entries not sorted by (i, j)");
    }
    c.entries.push_back(e);
  }
  return c;
}

inline Coupling read_coupling(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open coupling file " + path);
  return read_coupling(in, path);
}

}  // namespace otbkg
