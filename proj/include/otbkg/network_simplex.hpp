#pragma once

// Primal network simplex for the transportation problem on a complete
// bipartite graph (rows -> columns, dense cost matrix). Spanning-tree
// representation with parent/thread/successor-count indices and block-search
// pricing; strongly feasible trees guard against cycling on degenerate pivots.
// Arcs are implicit: arc a = i*m + j for real arcs, a = n*m + v for the
// artificial arc joining node v to the root. Non-tree arcs carry no flow
// (capacities are unbounded), so flow is stored per node on its tree arc.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <type_traits>
#include <vector>

#include "otbkg/error.hpp"
#include "otbkg/matrix.hpp"

namespace otbkg::detail {

template <typename Flow>
class BipartiteNetworkSimplex {
  static_assert(std::is_same_v<Flow, double> || std::is_same_v<Flow, std::int64_t>);

 public:
  struct Arc {
    std::size_t i, j;
    Flow flow;
  };

  BipartiteNetworkSimplex(const Matrix<double>& cost, std::span<const Flow> supply,
                          std::span<const Flow> demand)
      : cost_(cost), n_(supply.size()), m_(demand.size()) {
    require(cost.rows() == n_ && cost.cols() == m_, "network simplex: cost shape mismatch");
    require(n_ > 0 && m_ > 0, "network simplex: empty side");
    arc_num_ = static_cast<std::int64_t>(n_ * m_);
    node_num_ = static_cast<int>(n_ + m_);
    root_ = node_num_;

    double max_abs = 0.0;
    for (double c : cost.values()) {
      if (!std::isfinite(c)) throw DataError("transport cost matrix has a non-finite entry");
      max_abs = std::max(max_abs, std::fabs(c));
    }
    art_cost_ = 1.0 + 2.0 * max_abs;
    eps_ = 1e-12 * (1.0 + max_abs);

    const int total = node_num_ + 1;
    parent_.assign(total, -1);
    pred_.assign(total, -1);
    thread_.assign(total, 0);
    rev_thread_.assign(total, 0);
    succ_num_.assign(total, 1);
    last_succ_.assign(total, 0);
    pred_dir_.assign(total, 0);
    pi_.assign(total, 0.0);
    flow_.assign(total, Flow{});

    thread_[root_] = 0;
    rev_thread_[0] = root_;
    succ_num_[root_] = total;
    last_succ_[root_] = root_ - 1;
    pi_[root_] = 0.0;
    for (int u = 0; u < node_num_; ++u) {
      parent_[u] = root_;
      pred_[u] = arc_num_ + u;
      thread_[u] = u + 1;
      rev_thread_[u + 1] = u;
      succ_num_[u] = 1;
      last_succ_[u] = u;
      if (u < static_cast<int>(n_)) {
        const Flow s = supply[u];
        require(s >= Flow{}, "network simplex: negative supply");
        pred_dir_[u] = kUp;  // u -> root, cost 0
        flow_[u] = s;
        pi_[u] = 0.0;
      } else {
        const Flow d = demand[u - n_];
        require(d >= Flow{}, "network simplex: negative demand");
        pred_dir_[u] = kDown;  // root -> u, cost ART
        flow_[u] = d;
        pi_[u] = art_cost_;
      }
    }
    block_size_ = std::max<std::int64_t>(
        10, static_cast<std::int64_t>(std::sqrt(static_cast<double>(arc_num_))));
  }

  void run() {
    // Pivot until no improving arc; then recompute potentials from scratch
    // and re-price, so accumulated rounding cannot end the search early.
    for (int round = 0; round < 8; ++round) {
      while (find_entering_arc()) {
        find_join_node();
        find_leaving_arc();
        change_flow();
        update_tree_structure();
        update_potential();
        if (++pivots_ > kPivotLimit) throw NumericalError("network simplex: pivot limit reached");
      }
      if (!refresh_potentials()) break;
    }
    for (int u = 0; u < node_num_; ++u) {
      if (pred_[u] >= arc_num_ && flow_[u] > feasibility_slack())
        throw NumericalError("network simplex: artificial arc carries flow (unbalanced masses?)");
    }
  }

  /// Positive-flow real arcs of the final tree.
  std::vector<Arc> support() const {
    std::vector<Arc> out;
    for (int u = 0; u < node_num_; ++u) {
      const std::int64_t a = pred_[u];
      if (a < arc_num_ && flow_[u] > Flow{})
        out.push_back({static_cast<std::size_t>(a) / m_, static_cast<std::size_t>(a) % m_, flow_[u]});
    }
    return out;
  }

  /// Dual potentials with c_ij - u_i - v_j >= 0 (zero on the tree).
  double row_potential(std::size_t i) const { return -pi_[i]; }
  double col_potential(std::size_t j) const { return pi_[n_ + j]; }
  std::int64_t pivots() const { return pivots_; }

 private:
  static constexpr std::int8_t kUp = 1;     // tree arc points from node to parent
  static constexpr std::int8_t kDown = -1;  // tree arc points from parent to node
  static constexpr std::int64_t kPivotLimit = std::int64_t{1} << 40;

  Flow feasibility_slack() const {
    if constexpr (std::is_same_v<Flow, double>) return 1e-12;
    else return 0;
  }

  int source(std::int64_t a) const {
    if (a < arc_num_) return static_cast<int>(a / static_cast<std::int64_t>(m_));
    const int v = static_cast<int>(a - arc_num_);
    return v < static_cast<int>(n_) ? v : root_;
  }
  int target(std::int64_t a) const {
    if (a < arc_num_) return static_cast<int>(n_ + a % static_cast<std::int64_t>(m_));
    const int v = static_cast<int>(a - arc_num_);
    return v < static_cast<int>(n_) ? root_ : v;
  }
  double arc_cost(std::int64_t a) const {
    if (a < arc_num_) return cost_.values()[static_cast<std::size_t>(a)];
    return a - arc_num_ < static_cast<std::int64_t>(n_) ? 0.0 : art_cost_;
  }

  // Block search: scan arcs cyclically, stop at the end of the first block
  // containing a violating arc and take the most negative one in it.
  bool find_entering_arc() {
    const double* c = cost_.values().data();
    const double* pi_row = pi_.data();
    const double* pi_col = pi_.data() + n_;
    double best = -eps_;
    std::int64_t found = -1;
    std::int64_t cnt = block_size_;
    std::int64_t e = next_arc_;
    std::size_t i = static_cast<std::size_t>(e / static_cast<std::int64_t>(m_));
    std::size_t j = static_cast<std::size_t>(e % static_cast<std::int64_t>(m_));
    for (std::int64_t scanned = 0; scanned < arc_num_; ++scanned) {
      const double rc = c[e] + pi_row[i] - pi_col[j];
      if (rc < best) {
        best = rc;
        found = e;
      }
      ++e;
      if (++j == m_) {
        j = 0;
        if (++i == n_) {
          i = 0;
          e = 0;
        }
      }
      if (--cnt == 0) {
        if (found >= 0) break;
        cnt = block_size_;
      }
    }
    if (found < 0) return false;
    next_arc_ = e;
    in_arc_ = found;
    return true;
  }

  void find_join_node() {
    int u = source(in_arc_), v = target(in_arc_);
    while (u != v) {
      if (succ_num_[u] < succ_num_[v]) u = parent_[u];
      else v = parent_[v];
    }
    join_ = u;
  }

  void find_leaving_arc() {
    const int first = source(in_arc_), second = target(in_arc_);
    constexpr Flow kInf = std::numeric_limits<Flow>::has_infinity
                              ? std::numeric_limits<Flow>::infinity()
                              : std::numeric_limits<Flow>::max();
    delta_ = kInf;
    int result = 0;
    // Flow decreases on tree arcs traversed against their direction.
    for (int u = first; u != join_; u = parent_[u]) {
      if (pred_dir_[u] == kUp) {
        const Flow d = std::max(flow_[u], Flow{});
        if (d < delta_) {
          delta_ = d;
          u_out_ = u;
          result = 1;
        }
      }
    }
    for (int u = second; u != join_; u = parent_[u]) {
      if (pred_dir_[u] == kDown) {
        const Flow d = std::max(flow_[u], Flow{});
        if (d <= delta_) {
          delta_ = d;
          u_out_ = u;
          result = 2;
        }
      }
    }
    if (result == 0) throw NumericalError("network simplex: unbounded cycle");
    if (result == 1) {
      u_in_ = first;
      v_in_ = second;
    } else {
      u_in_ = second;
      v_in_ = first;
    }
  }

  void change_flow() {
    if (delta_ > Flow{}) {
      for (int u = source(in_arc_); u != join_; u = parent_[u])
        flow_[u] -= pred_dir_[u] * delta_;
      for (int u = target(in_arc_); u != join_; u = parent_[u])
        flow_[u] += pred_dir_[u] * delta_;
    }
  }

  void update_tree_structure() {
    const int old_rev_thread = rev_thread_[u_out_];
    const int old_succ_num = succ_num_[u_out_];
    const int old_last_succ = last_succ_[u_out_];
    v_out_ = parent_[u_out_];

    if (u_in_ == u_out_) {
      parent_[u_in_] = v_in_;
      pred_[u_in_] = in_arc_;
      pred_dir_[u_in_] = u_in_ == source(in_arc_) ? kUp : kDown;
      flow_[u_in_] = delta_;
      if (thread_[v_in_] != u_out_) {
        int after = thread_[old_last_succ];
        thread_[old_rev_thread] = after;
        rev_thread_[after] = old_rev_thread;
        after = thread_[v_in_];
        thread_[v_in_] = u_out_;
        rev_thread_[u_out_] = v_in_;
        thread_[old_last_succ] = after;
        rev_thread_[after] = old_last_succ;
      }
    } else {
      const int thread_continue = old_rev_thread == v_in_ ? thread_[old_last_succ] : thread_[v_in_];

      // Re-hang the stem (u_in .. u_out) under v_in, reversing parent links.
      int stem = u_in_;
      int par_stem = v_in_;
      int next_stem;
      int last = last_succ_[u_in_];
      int before, after = thread_[last];
      thread_[v_in_] = u_in_;
      dirty_revs_.clear();
      dirty_revs_.push_back(v_in_);
      while (stem != u_out_) {
        next_stem = parent_[stem];
        thread_[last] = next_stem;
        dirty_revs_.push_back(last);

        before = rev_thread_[stem];
        thread_[before] = after;
        rev_thread_[after] = before;

        parent_[stem] = par_stem;
        par_stem = stem;
        stem = next_stem;

        last = last_succ_[stem] == last_succ_[par_stem] ? rev_thread_[par_stem] : last_succ_[stem];
        after = thread_[last];
      }
      parent_[u_out_] = par_stem;
      thread_[last] = thread_continue;
      rev_thread_[thread_continue] = last;
      last_succ_[u_out_] = last;

      if (old_rev_thread != v_in_) {
        thread_[old_rev_thread] = after;
        rev_thread_[after] = old_rev_thread;
      }
      for (int u : dirty_revs_) rev_thread_[thread_[u]] = u;

      // Shift pred arcs (and their flow) one step down the stem.
      int tmp_sc = 0;
      const int tmp_ls = last_succ_[u_out_];
      for (int u = u_out_, p = parent_[u]; u != u_in_; u = p, p = parent_[u]) {
        pred_[u] = pred_[p];
        pred_dir_[u] = static_cast<std::int8_t>(-pred_dir_[p]);
        flow_[u] = flow_[p];
        tmp_sc += succ_num_[u] - succ_num_[p];
        succ_num_[u] = tmp_sc;
        last_succ_[p] = tmp_ls;
      }
      pred_[u_in_] = in_arc_;
      pred_dir_[u_in_] = u_in_ == source(in_arc_) ? kUp : kDown;
      flow_[u_in_] = delta_;
      succ_num_[u_in_] = old_succ_num;
    }

    const int up_limit_out = last_succ_[join_] == v_in_ ? join_ : -1;
    const int last_succ_out = last_succ_[u_out_];
    for (int u = v_in_; u != -1 && last_succ_[u] == v_in_; u = parent_[u]) last_succ_[u] = last_succ_out;

    if (join_ != old_rev_thread && v_in_ != old_rev_thread) {
      for (int u = v_out_; u != up_limit_out && last_succ_[u] == old_last_succ; u = parent_[u])
        last_succ_[u] = old_rev_thread;
    } else if (last_succ_out != old_last_succ) {
      for (int u = v_out_; u != up_limit_out && last_succ_[u] == old_last_succ; u = parent_[u])
        last_succ_[u] = last_succ_out;
    }

    for (int u = v_in_; u != join_; u = parent_[u]) succ_num_[u] += old_succ_num;
    for (int u = v_out_; u != join_; u = parent_[u]) succ_num_[u] -= old_succ_num;
  }

  void update_potential() {
    const double sigma = pi_[v_in_] - pi_[u_in_] - pred_dir_[u_in_] * arc_cost(in_arc_);
    const int end = thread_[last_succ_[u_in_]];
    for (int u = u_in_; u != end; u = thread_[u]) pi_[u] += sigma;
  }

  // Recomputes every potential from its tree arc in thread (preorder) order.
  // Returns true when the refreshed values differ at all.
  bool refresh_potentials() {
    bool changed = false;
    for (int u = thread_[root_]; u != root_; u = thread_[u]) {
      const double v = pi_[parent_[u]] - pred_dir_[u] * arc_cost(pred_[u]);
      if (v != pi_[u]) changed = true;
      pi_[u] = v;
    }
    return changed;
  }

  const Matrix<double>& cost_;
  std::size_t n_, m_;
  std::int64_t arc_num_;
  int node_num_, root_;
  double art_cost_ = 1.0, eps_ = 1e-12;
  std::int64_t block_size_ = 10, next_arc_ = 0, pivots_ = 0;

  std::vector<int> parent_, thread_, rev_thread_, succ_num_, last_succ_;
  std::vector<std::int64_t> pred_;
  std::vector<std::int8_t> pred_dir_;
  std::vector<double> pi_;
  std::vector<Flow> flow_;
  std::vector<int> dirty_revs_;

  std::int64_t in_arc_ = -1;
  int join_ = 0, u_in_ = 0, v_in_ = 0, u_out_ = 0, v_out_ = 0;
  Flow delta_{};
};

}  // namespace otbkg::detail
