#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>

#include "otbkg/error.hpp"

namespace otbkg::detail {

// Transportation simplex (MODI / stepping-stone) for balanced problems with
// at most kMax rows and columns. The basis survives between solve() calls, so
// a sequence of cost matrices over the same marginals warm-starts from the
// previous optimum; that is the access pattern of the symmetry search in emd().
class SmallTransport {
 public:
  static constexpr int kMax = 5;
  using CostMatrix = std::array<std::array<double, kMax>, kMax>;

  void reset(std::span<const double> supply, std::span<const double> demand) {
    m_ = static_cast<int>(supply.size());
    n_ = static_cast<int>(demand.size());
    require(m_ >= 1 && m_ <= kMax && n_ >= 1 && n_ <= kMax, "SmallTransport: bad shape");
    for (int i = 0; i < m_; ++i) supply_[i] = supply[i];
    for (int j = 0; j < n_; ++j) demand_[j] = demand[j];
    northwest_corner();
  }

  int rows() const { return m_; }
  int cols() const { return n_; }
  double flow(int i, int j) const { return x_[i][j]; }

  /// Optimal objective for `cost` (entries [0,rows) x [0,cols) are read).
  /// With a finite `stop_above`, returns early with a lower bound on the
  /// optimum once that bound exceeds stop_above.
  double solve(const CostMatrix& cost, double stop_above = std::numeric_limits<double>::infinity()) {
    const bool screening = stop_above < std::numeric_limits<double>::infinity();
    double scale = 0.0;
    for (int i = 0; i < m_; ++i)
      for (int j = 0; j < n_; ++j) scale = std::max(scale, cost[i][j]);
    const double tol = 1e-12 * (1.0 + scale);

    for (int iter = 0;; ++iter) {
      if (iter > kIterationLimit) throw NumericalError("SmallTransport: iteration limit reached");
      compute_potentials(cost);
      // Dantzig pricing first; Bland's smallest-index rule once pivots drag on
      // (degenerate cycling guard). Basic cells have zero reduced cost up to
      // rounding, far above -tol, so they are priced along with the rest.
      const bool bland = iter > kBlandAfter;
      int ei = -1, ej = -1;
      double best = -tol;
      // Shifting u_i by its row's most negative reduced cost gives feasible
      // duals, hence the lower bound sum s_i u_i + sum d_j v_j.
      double dual = 0.0;
      for (int i = 0; i < m_ && !(bland && ei >= 0); ++i) {
        double row_min = 0.0;
        for (int j = 0; j < n_; ++j) {
          const double rc = cost[i][j] - u_[i] - v_[j];
          row_min = std::min(row_min, rc);
          if (rc < best && !is_basic(i, j)) {
            best = rc;
            ei = i;
            ej = j;
            if (bland) break;
          }
        }
        dual += supply_[i] * (u_[i] + row_min);
      }
      if (ei < 0) break;
      if (screening && !bland) {
        for (int j = 0; j < n_; ++j) dual += demand_[j] * v_[j];
        if (dual > stop_above) return dual;
      }
      pivot(ei, ej, bland);
    }
    double obj = 0.0;
    for (int k = 0; k < norder_; ++k) obj += x_[order_[k].i][order_[k].j] * cost[order_[k].i][order_[k].j];
    return obj;
  }

 private:
  static constexpr int kIterationLimit = 500;
  static constexpr int kBlandAfter = 40;
  using Mask = std::uint8_t;

  bool is_basic(int i, int j) const { return (row_mask_[i] >> j) & 1; }

  void set_basic(int i, int j, bool on) {
    if (on) {
      row_mask_[i] |= static_cast<Mask>(1u << j);
      col_mask_[j] |= static_cast<Mask>(1u << i);
    } else {
      row_mask_[i] &= static_cast<Mask>(~(1u << j));
      col_mask_[j] &= static_cast<Mask>(~(1u << i));
    }
  }

  void northwest_corner() {
    order_valid_ = false;
    row_mask_.fill(0);
    col_mask_.fill(0);
    for (auto& r : x_) r.fill(0.0);
    std::array<double, kMax> ra{}, rb{};
    for (int i = 0; i < m_; ++i) ra[i] = supply_[i];
    for (int j = 0; j < n_; ++j) rb[j] = demand_[j];
    int i = 0, j = 0;
    while (true) {
      const double f = std::min(ra[i], rb[j]);
      set_basic(i, j, true);
      x_[i][j] = f;
      ra[i] -= f;
      rb[j] -= f;
      if (i == m_ - 1 && j == n_ - 1) break;
      if (i < m_ - 1 && (ra[i] <= rb[j] || j == n_ - 1)) {
        ++i;
      } else {
        ++j;
      }
    }
  }

  // Solves u_i + v_j = c_ij over the basis tree, rooted at u_0 = 0. The
  // resolution order depends only on the basis, so it is cached until the
  // next pivot.
  void compute_potentials(const CostMatrix& cost) {
    if (!order_valid_) build_order();
    u_[0] = 0.0;
    for (int k = 0; k < norder_; ++k) {
      const Step st = order_[k];
      if (st.row_known) v_[st.j] = cost[st.i][st.j] - u_[st.i];
      else u_[st.i] = cost[st.i][st.j] - v_[st.j];
    }
  }

  // Breadth-first over the basis tree from row 0. Tree nodes: rows
  // 0..kMax-1, columns kMax..2kMax-1.
  void build_order() {
    std::array<int, 2 * kMax> queue{};
    int head = 0, tail = 0;
    Mask seen_rows = 1, seen_cols = 0;
    queue[tail++] = 0;
    norder_ = 0;
    while (head < tail) {
      const int node = queue[head++];
      if (node < kMax) {
        for (Mask fresh = row_mask_[node] & static_cast<Mask>(~seen_cols); fresh; fresh &= fresh - 1) {
          const int j = std::countr_zero(fresh);
          order_[norder_++] = {static_cast<std::int8_t>(node), static_cast<std::int8_t>(j), true};
          seen_cols |= static_cast<Mask>(1u << j);
          queue[tail++] = kMax + j;
        }
      } else {
        const int j = node - kMax;
        for (Mask fresh = col_mask_[j] & static_cast<Mask>(~seen_rows); fresh; fresh &= fresh - 1) {
          const int i = std::countr_zero(fresh);
          order_[norder_++] = {static_cast<std::int8_t>(i), static_cast<std::int8_t>(j), false};
          seen_rows |= static_cast<Mask>(1u << i);
          queue[tail++] = i;
        }
      }
    }
    if (norder_ != m_ + n_ - 1) throw NumericalError("SmallTransport: basis is not a spanning tree");
    order_valid_ = true;
  }

  // Enters cell (ei, ej); the cycle is the tree path from column ej back to
  // row ei, cells alternating -,+,-,...
  void pivot(int ei, int ej, bool bland) {
    std::array<int, 2 * kMax> parent;
    parent.fill(-2);
    std::array<int, 2 * kMax> queue{};
    int head = 0, tail = 0;
    const int start = kMax + ej;
    parent[start] = -1;
    queue[tail++] = start;
    Mask seen_rows = 0, seen_cols = static_cast<Mask>(1u << ej);
    while (head < tail && parent[ei] == -2) {
      const int node = queue[head++];
      if (node >= kMax) {
        for (Mask fresh = col_mask_[node - kMax] & static_cast<Mask>(~seen_rows); fresh; fresh &= fresh - 1) {
          const int i = std::countr_zero(fresh);
          parent[i] = node;
          seen_rows |= static_cast<Mask>(1u << i);
          queue[tail++] = i;
        }
      } else {
        for (Mask fresh = row_mask_[node] & static_cast<Mask>(~seen_cols); fresh; fresh &= fresh - 1) {
          const int j = std::countr_zero(fresh);
          parent[kMax + j] = node;
          seen_cols |= static_cast<Mask>(1u << j);
          queue[tail++] = kMax + j;
        }
      }
    }
    if (parent[ei] == -2) throw NumericalError("SmallTransport: entering cell closes no cycle");

    // Walk from row ei back to column ej collecting cells.
    std::array<std::array<int, 2>, 2 * kMax> cells;
    int ncells = 0;
    for (int node = ei; parent[node] != -1; node = parent[node]) {
      const int p = parent[node];
      if (node < kMax) cells[ncells++] = {node, p - kMax};
      else cells[ncells++] = {p, node - kMax};
    }
    // cells[0] touches row ei (sign -), cells[ncells-1] touches column ej (sign -).
    double theta = std::numeric_limits<double>::infinity();
    int leave = -1;
    for (int c = 0; c < ncells; c += 2) {
      const double f = x_[cells[c][0]][cells[c][1]];
      const bool better =
          leave < 0 || f < theta ||
          (bland && f == theta && index_of(cells[c]) < index_of(cells[leave]));
      if (better) {
        theta = f;
        leave = c;
      }
    }
    for (int c = 0; c < ncells; ++c) {
      double& f = x_[cells[c][0]][cells[c][1]];
      f += (c % 2 == 0) ? -theta : theta;
    }
    const auto lc = cells[leave];
    set_basic(lc[0], lc[1], false);
    x_[lc[0]][lc[1]] = 0.0;
    set_basic(ei, ej, true);
    x_[ei][ej] = theta;
    order_valid_ = false;
  }

  static int index_of(const std::array<int, 2>& c) { return c[0] * kMax + c[1]; }

  struct Step {
    std::int8_t i, j;
    bool row_known;
  };

  int m_ = 0, n_ = 0;
  std::array<Step, 2 * kMax> order_{};
  int norder_ = 0;
  bool order_valid_ = false;
  std::array<double, kMax> supply_{}, demand_{};
  std::array<double, kMax> u_{}, v_{};
  std::array<Mask, kMax> row_mask_{}, col_mask_{};  // basic cells by row / column
  std::array<std::array<double, kMax>, kMax> x_{};
};

}  // namespace otbkg::detail
