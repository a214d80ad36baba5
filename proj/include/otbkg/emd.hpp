#pragma once

// Event-space metric. emd_tilde is the jet-level transport cost between two
// events, with unmatched pt charged one-for-one; emd minimizes it over the
// rotation/reflection group acting on the first event.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "otbkg/error.hpp"
#include "otbkg/event.hpp"
#include "otbkg/matrix.hpp"
#include "otbkg/parallel.hpp"
#include "otbkg/small_transport.hpp"

namespace otbkg {

struct MetricParams {
  double r = 0.4;         // angular vs. energy trade-off R
  int grid_size = 36;     // rotations tried per reflection pair
  int refine_iters = 60;  // line-search steps per refinement round (0: grid only)

  void validate() const {
    if (!(r > 0.0)) throw DataError("metric R must be positive");
    if (grid_size < 4) throw DataError("metric grid size must be at least 4");
    if (refine_iters < 0) throw DataError("metric refine_iters must be nonnegative");
  }
};

/// Transported pt between jet i of the first event and jet j of the second.
struct JetFlow {
  std::array<std::array<double, 4>, 4> flows{};

  double row_sum(int i) const { return flows[i][0] + flows[i][1] + flows[i][2] + flows[i][3]; }
  double col_sum(int j) const { return flows[0][j] + flows[1][j] + flows[2][j] + flows[3][j]; }
  double total() const { return row_sum(0) + row_sum(1) + row_sum(2) + row_sum(3); }
};

struct EmdTildeResult {
  double cost = 0.0;
  JetFlow flow;
};

struct EmdResult {
  double value = 0.0;
  SymmetryTransform transform;  // applied to the first event
};

namespace detail {

// Fixed (g, h) pair; evaluates the transport cost of T(g) against h for any
// symmetry T while keeping the transport basis warm.
class JetTransport {
 public:
  JetTransport(const Event& g, const Event& h, double r) : inv_r_(1.0 / r) {
    const double sg = g.scalar_pt(), sh = h.scalar_pt();
    imbalance_ = std::fabs(sg - sh);
    flow_total_ = std::min(sg, sh);
    std::array<double, 5> supply{}, demand{};
    for (int i = 0; i < 4; ++i) {
      supply[i] = supply_[i] = g.jets[i].pt;
      demand[i] = demand_[i] = h.jets[i].pt;
      phi_g_[i] = g.jets[i].phi;
      phi_h_[i] = h.jets[i].phi;
    }
    for (int s = 0; s < 2; ++s)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          const double deta = (s == 0 ? 1.0 : -1.0) * g.jets[i].eta - h.jets[j].eta;
          deta2_[s][i][j] = deta * deta;
        }
    rows_ = cols_ = 4;
    // A virtual source (sink) at zero ground cost absorbs the pt surplus of
    // the lighter (heavier) event.
    if (sh > sg) {
      supply[4] = sh - sg;
      rows_ = 5;
    } else if (sg > sh) {
      demand[4] = sg - sh;
      cols_ = 5;
    }
    base_.reset(std::span<const double>(supply.data(), rows_),
                std::span<const double>(demand.data(), cols_));
    for (auto& s : solvers_) s = base_;
    for (auto& s : bound_solvers_) s = base_;
    for (auto& row : cost_) row.fill(0.0);
  }

  double imbalance() const { return imbalance_; }
  /// pt moved between real jets, min(s_g, s_h)
  double flow_total() const { return flow_total_; }

  /// Angular part of the cost, (1/R) sum f_ij dR_ij, for transform t.
  double evaluate(const SymmetryTransform& t, int slot) {
    fill_cost(t);
    return solvers_[slot].solve(cost_);
  }

  /// Solves for the transform of the last lower_bound() call. Once the
  /// value provably exceeds stop_above, a lower bound is returned instead.
  double solve_filled(int slot, double stop_above) {
    cost_from_sq();
    return solvers_[slot].solve(cost_, stop_above);
  }

  /// Bound valid for every rotation with this eta sign: the transport cost
  /// with the phi part of the ground distance dropped.
  double eta_only_bound(int iota1) {
    const int s = iota1 > 0 ? 0 : 1;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) cost_[i][j] = std::sqrt(deta2_[s][i][j]) * inv_r_;
    SmallTransport scratch = base_;
    return scratch.solve(cost_);
  }

  /// Cheap lower bound on evaluate(t): every unit of real supply (demand)
  /// pays at least its row (column) minimum; units the virtual node can
  /// absorb are taken off the most expensive minima first. Keeps the
  /// squared distances for t for solve_filled().
  double lower_bound(const SymmetryTransform& t) {
    const auto& d2 = deta2_[t.iota1 > 0 ? 0 : 1];
    for (int i = 0; i < 4; ++i) {
      const double phi = rotated_phi(t, i);
      for (int j = 0; j < 4; ++j) {
        const double dphi = wrapped_gap(phi, phi_h_[j]);
        sq_[i][j] = d2[i][j] + dphi * dphi;
      }
    }
    return relaxed_from_sq();
  }

  /// Lower bound on evaluate() over rotations within `half_width` of
  /// t.delta (each phi gap shrinks by at most half_width). The cheap form
  /// uses row/column minima, the exact form solves the transport.
  double interval_bound(const SymmetryTransform& t, int slot, double half_width, bool exact, double stop_above) {
    const int s = t.iota1 > 0 ? 0 : 1;
    for (int i = 0; i < 4; ++i) {
      const double phi = rotated_phi(t, i);
      for (int j = 0; j < 4; ++j) {
        const double dphi = std::max(0.0, wrapped_gap(phi, phi_h_[j]) - half_width);
        sq_[i][j] = deta2_[s][i][j] + dphi * dphi;
      }
    }
    if (!exact) return relaxed_from_sq();
    cost_from_sq();
    return bound_solvers_[slot].solve(cost_, stop_above);
  }

  JetFlow flow(int slot) const {
    JetFlow f;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) f.flows[i][j] = solvers_[slot].flow(i, j);
    return f;
  }

  /// flow_cost and its first two derivatives in t.delta. Away from the
  /// phi wrap each term f*sqrt(deta^2 + x^2) is smooth and convex in delta.
  double flow_cost_derivs(const JetFlow& f, const SymmetryTransform& t, double& d1, double& d2) const {
    const auto& e2 = deta2_[t.iota1 > 0 ? 0 : 1];
    double total = 0.0;
    d1 = d2 = 0.0;
    for (int i = 0; i < 4; ++i) {
      const double phi = rotated_phi(t, i);
      for (int j = 0; j < 4; ++j) {
        if (f.flows[i][j] == 0.0) continue;
        double x = phi - phi_h_[j];  // signed gap in (-pi, pi]
        if (x > kPi) x -= kTwoPi;
        else if (x <= -kPi) x += kTwoPi;
        const double dist = std::sqrt(e2[i][j] + x * x);
        total += f.flows[i][j] * dist;
        if (dist > 0.0) {
          d1 += f.flows[i][j] * x / dist;
          d2 += f.flows[i][j] * e2[i][j] / (dist * dist * dist);
        }
      }
    }
    d1 *= inv_r_;
    d2 *= inv_r_;
    return total * inv_r_;
  }

  /// Angular cost of a fixed flow f under transform t. An upper bound on
  /// evaluate(t) since f stays feasible for every t.
  double flow_cost(const JetFlow& f, const SymmetryTransform& t) const {
    const auto& d2 = deta2_[t.iota1 > 0 ? 0 : 1];
    double total = 0.0;
    for (int i = 0; i < 4; ++i) {
      const double phi = rotated_phi(t, i);
      for (int j = 0; j < 4; ++j) {
        if (f.flows[i][j] == 0.0) continue;
        const double dphi = wrapped_gap(phi, phi_h_[j]);
        total += f.flows[i][j] * std::sqrt(d2[i][j] + dphi * dphi);
      }
    }
    return total * inv_r_;
  }

 private:
  // sqrt is monotone, so row and column minima are taken on squared
  // distances and only the minima are rooted.
  double relaxed_from_sq() const {
    std::array<double, 4> row_min, col_min;
    for (int i = 0; i < 4; ++i)
      row_min[i] = std::sqrt(std::min(std::min(sq_[i][0], sq_[i][1]), std::min(sq_[i][2], sq_[i][3]))) * inv_r_;
    for (int j = 0; j < 4; ++j)
      col_min[j] = std::sqrt(std::min(std::min(sq_[0][j], sq_[1][j]), std::min(sq_[2][j], sq_[3][j]))) * inv_r_;
    const double by_rows = relaxed_bound(row_min, supply_, cols_ == 5 ? imbalance_ : 0.0);
    const double by_cols = relaxed_bound(col_min, demand_, rows_ == 5 ? imbalance_ : 0.0);
    return std::max(by_rows, by_cols);
  }

  // sum_k mass_k*minc_k after removing up to `spare` mass from the largest minc.
  static double relaxed_bound(const std::array<double, 4>& minc, std::array<double, 4> mass,
                              double spare) {
    while (spare > 0.0) {
      int top = -1;
      for (int k = 0; k < 4; ++k)
        if (mass[k] > 0.0 && (top < 0 || minc[k] > minc[top])) top = k;
      if (top < 0) break;
      const double take = std::min(spare, mass[top]);
      mass[top] -= take;
      spare -= take;
    }
    return mass[0] * minc[0] + mass[1] * minc[1] + mass[2] * minc[2] + mass[3] * minc[3];
  }

  double rotated_phi(const SymmetryTransform& t, int i) const {
    double phi = t.delta + t.iota2 * phi_g_[i];
    while (phi < 0.0) phi += kTwoPi;
    while (phi >= kTwoPi) phi -= kTwoPi;
    return phi;
  }

  // both angles in [0, 2pi)
  static double wrapped_gap(double a, double b) {
    const double d = std::fabs(a - b);
    return d > kPi ? kTwoPi - d : d;
  }

  void cost_from_sq() {
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) cost_[i][j] = std::sqrt(sq_[i][j]) * inv_r_;
  }

  void fill_cost(const SymmetryTransform& t) {
    const auto& d2 = deta2_[t.iota1 > 0 ? 0 : 1];
    for (int i = 0; i < 4; ++i) {
      const double phi = rotated_phi(t, i);
      for (int j = 0; j < 4; ++j) {
        const double dphi = wrapped_gap(phi, phi_h_[j]);
        cost_[i][j] = std::sqrt(d2[i][j] + dphi * dphi) * inv_r_;
      }
    }
  }

  double inv_r_;
  double imbalance_ = 0.0, flow_total_ = 0.0;
  int rows_ = 4, cols_ = 4;
  std::array<double, 4> phi_g_{}, phi_h_{};
  std::array<std::array<std::array<double, 4>, 4>, 2> deta2_{};  // by eta sign
  std::array<double, 4> supply_{}, demand_{};
  SmallTransport base_;
  std::array<SmallTransport, 4> solvers_;  // one warm basis per reflection pair
  std::array<SmallTransport, 4> bound_solvers_;  // same, for window bounds
  SmallTransport::CostMatrix cost_{};
  std::array<std::array<double, 4>, 4> sq_{};  // squared ground distances
};

inline constexpr std::array<std::array<int, 2>, 4> kReflections{{{1, 1}, {-1, 1}, {1, -1}, {-1, -1}}};

}  // namespace detail

inline EmdTildeResult emd_tilde(const Event& g, const Event& h, const MetricParams& params) {
  params.validate();
  detail::JetTransport jt(g, h, params.r);
  const double angular = jt.evaluate(SymmetryTransform{}, 0);
  return {angular + jt.imbalance(), jt.flow(0)};
}

/// Grid search over rotations for each reflection pair, then line-search
/// refinement of the rotation around the best grid point and around any
/// other grid point whose window could still hold a lower value.
inline EmdResult emd_detailed(const Event& g, const Event& h, const MetricParams& params) {
  params.validate();
  detail::JetTransport jt(g, h, params.r);
  const double step = kTwoPi / params.grid_size;
  double best = std::numeric_limits<double>::infinity();
  SymmetryTransform best_t;
  int best_slot = 0;
  // Eta sign first: the phi-free transport cost bounds a whole half of the
  // grid, so the better half is searched first and the other often skipped.
  const double eta_bound[2] = {jt.eta_only_bound(1), jt.eta_only_bound(-1)};
  const int first = eta_bound[1] < eta_bound[0] ? 1 : 0;
  const std::array<int, 4> order{first, first + 2, 1 - first, 3 - first};
  int best_k = 0;
  // per grid point: exact value, or a lower bound on it when pruned (NaN if
  // the whole reflection pair was skipped)
  std::array<std::vector<double>, 4> at_grid;
  for (auto& v : at_grid) v.assign(static_cast<std::size_t>(params.grid_size), std::numeric_limits<double>::quiet_NaN());
  for (int s : order) {
    const auto [i1, i2] = detail::kReflections[s];
    if (eta_bound[i1 > 0 ? 0 : 1] >= best) continue;
    for (int k = 0; k < params.grid_size; ++k) {
      const SymmetryTransform t{k * step, i1, i2};
      const double lb = jt.lower_bound(t);
      at_grid[s][k] = lb;
      if (lb >= best) continue;
      const double v = jt.solve_filled(s, best);
      at_grid[s][k] = v;
      if (v < best || (v == best && s < best_slot)) {
        best = v;
        best_t = t;
        best_slot = s;
        best_k = k;
      }
    }
  }

  if (params.refine_iters > 0) {
    // Alternate between the transport solve at the current rotation and a
    // line search of the rotation with that flow held fixed. The
    // fixed-flow cost bounds the true cost from above and touches it at the
    // current rotation, so every accepted round strictly lowers the value.
    constexpr int kMaxRounds = 16;
    auto refine = [&](SymmetryTransform t, int slot) {
      const double lo = t.delta - step, hi = t.delta + step;
      double current = jt.evaluate(t, slot);
      if (current < best) {
        best = current;
        best_t = t;
      }
      for (int round = 0; round < kMaxRounds; ++round) {
        const JetFlow f = jt.flow(slot);
        auto g = [&](double delta, double& d1, double& d2) {
          SymmetryTransform u = t;
          u.delta = delta;
          return jt.flow_cost_derivs(f, u, d1, d2);
        };
        // local minimum of the fixed-flow cost on [lo, hi]: Newton on the
        // derivative, falling back to bisection, keeping g'(a) < 0 < g'(b)
        double g1, g2, x;
        double a = lo, b = hi;
        g(a, g1, g2);
        if (g1 >= 0.0) {
          x = a;
        } else {
          g(b, g1, g2);
          if (g1 <= 0.0) {
            x = b;
          } else {
            x = t.delta;
            for (int it = 0; it < params.refine_iters && b - a > 1e-13; ++it) {
              g(x, g1, g2);
              if (g1 == 0.0) break;
              (g1 < 0.0 ? a : b) = x;
              const double nx = g2 > 0.0 ? x - g1 / g2 : 0.5 * (a + b);
              const double next = (nx > a && nx < b) ? nx : 0.5 * (a + b);
              if (std::fabs(next - x) < 1e-15) break;
              x = next;
            }
          }
        }
        double d1, d2;
        const double fx = g(x, d1, d2);
        if (!(fx < current - 1e-13 * (1.0 + current))) break;
        t.delta = x;
        current = jt.evaluate(t, slot);
        if (current < best) {
          best = current;
          best_t = t;
        }
      }
    };
    refine(best_t, best_slot);
    // The best grid point is not always in the deepest basin. Every rotation
    // lies within step/2 of a grid point, and the angular cost is
    // (flow/R)-Lipschitz in delta, so a cell can only hold a lower value if
    // its grid bound minus that slope times step/2 undercuts the refined
    // value. Survivors get an exact window bound, then a refinement.
    // true if some rotation within `half` of t.delta may beat best; bisects
    // the window to tighten the bound before a refinement is paid for
    constexpr int kScreenDepth = 3;
    auto may_undercut = [&](const SymmetryTransform& t, int slot, double half, int depth, auto& self) -> bool {
      if (jt.interval_bound(t, slot, half, false, best) >= best) return false;
      if (jt.interval_bound(t, slot, half, true, best) >= best) return false;
      if (depth == 0) return true;
      SymmetryTransform lo = t, hi = t;
      lo.delta -= 0.5 * half;
      hi.delta += 0.5 * half;
      return self(lo, slot, 0.5 * half, depth - 1, self) || self(hi, slot, 0.5 * half, depth - 1, self);
    };
    const double slope_half_step = jt.flow_total() / params.r * 0.5 * step;
    for (int s : order) {
      const auto [i1, i2] = detail::kReflections[s];
      if (eta_bound[i1 > 0 ? 0 : 1] >= best) continue;
      for (int k = 0; k < params.grid_size; ++k) {
        if (s == best_slot && k == best_k) continue;
        const SymmetryTransform t{k * step, i1, i2};
        double at = at_grid[s][k];
        if (std::isnan(at)) at = jt.lower_bound(t);
        if (at - slope_half_step >= best) continue;
        if (!may_undercut(t, s, 0.5 * step, kScreenDepth, may_undercut)) continue;
        refine(t, s);
      }
    }
  }
  best_t.delta = wrap_phi(best_t.delta);
  return {best + jt.imbalance(), best_t};
}

inline double emd(const Event& g, const Event& h, const MetricParams& params) {
  return emd_detailed(g, h, params).value;
}

/// Lower bound on emd(g, h) valid for every rotation: the phi-free transport
/// cost, minimized over the eta sign, plus the pt imbalance.
inline double emd_lower_bound(const Event& g, const Event& h, const MetricParams& params) {
  detail::JetTransport jt(g, h, params.r);
  return std::min(jt.eta_only_bound(1), jt.eta_only_bound(-1)) + jt.imbalance();
}

/// D(i, j) = emd(a[i], b[j]). Rows are distributed over threads; each entry is
/// computed independently so the output does not depend on the schedule.
inline Matrix<double> distance_matrix(std::span<const Event> a, std::span<const Event> b,
                                      const MetricParams& params, unsigned threads = 0) {
  params.validate();
  require(!a.empty() && !b.empty(), "distance_matrix: empty event list");
  Matrix<double> d(a.size(), b.size());
  parallel_for(
      a.size(),
      [&](std::size_t i) {
        for (std::size_t j = 0; j < b.size(); ++j) {
          try {
            d(i, j) = emd(a[i], b[j], params);
          } catch (const std::exception& e) {
            throw NumericalError("distance_matrix entry (" + std::to_string(i) + ", " +
                                 std::to_string(j) + "): " + e.what());
          }
        }
      },
      threads);
  return d;
}

// Binary layout (little endian): 8-byte magic, u32 version, u64 rows, u64 cols,
// f64 R, u32 grid size, then rows*cols f64 in row-major order.
inline constexpr char kDistanceMagic[8] = {'O', 'T', 'B', 'K', 'G', 'D', 'M', '\0'};
inline constexpr std::uint32_t kDistanceVersion = 1;

struct StoredDistances {
  Matrix<double> values;
  double r = 0.0;
  std::uint32_t grid_size = 0;
};

namespace detail {
static_assert(std::endian::native == std::endian::little, "binary formats assume little endian");

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError(path + ": truncated distance matrix file");
  return v;
}
}  // namespace detail

inline void write_distance_matrix(const std::string& path, const Matrix<double>& d,
                                  const MetricParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(kDistanceMagic, sizeof(kDistanceMagic));
  detail::write_raw(out, kDistanceVersion);
  detail::write_raw(out, static_cast<std::uint64_t>(d.rows()));
  detail::write_raw(out, static_cast<std::uint64_t>(d.cols()));
  detail::write_raw(out, params.r);
  detail::write_raw(out, static_cast<std::uint32_t>(params.grid_size));
  const auto v = d.values();
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!out) throw DataError("failed writing " + path);
}

inline StoredDistances read_distance_matrix(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kDistanceMagic, sizeof(magic)) != 0)
    throw DataError(path + ": not a distance matrix file");
  const auto version = detail::read_raw<std::uint32_t>(in, path);
  if (version != kDistanceVersion)
    throw DataError(path + ": unsupported distance matrix version " + std::to_string(version));
  const auto rows = detail::read_raw<std::uint64_t>(in, path);
  const auto cols = detail::read_raw<std::uint64_t>(in, path);
  StoredDistances s;
  s.r = detail::read_raw<double>(in, path);
  s.grid_size = detail::read_raw<std::uint32_t>(in, path);
  std::vector<double> data(rows * cols);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw DataError(path + ": truncated distance matrix file");
  s.values = Matrix<double>(rows, cols, std::move(data));
  return s;
}

}  // namespace otbkg
