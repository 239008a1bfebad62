#pragma once

// Small dense linear programs: two-phase tableau simplex with Bland's rule.
//
//   minimize c'x  subject to  rows (<=, >=, =) rhs,  x >= 0
//
// After an optimum is found the feasible set can be narrowed to the optimal
// face, which lets callers break ties lexicographically by optimizing a
// sequence of secondary objectives.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "feddd/error.hpp"

namespace feddd {

enum class RowSense { less_equal, greater_equal, equal };

struct LinearProgram {
  std::size_t num_vars = 0;
  std::vector<std::vector<double>> rows;  // dense, num_vars wide
  std::vector<RowSense> senses;
  std::vector<double> rhs;

  void add_row(std::vector<double> coeffs, RowSense sense, double b) {
    require(coeffs.size() == num_vars, ErrorKind::shape_mismatch, "LP row width mismatch");
    rows.push_back(std::move(coeffs));
    senses.push_back(sense);
    rhs.push_back(b);
  }
};

class Simplex {
 public:
  static constexpr double kTol = 1e-11;

  explicit Simplex(const LinearProgram& lp) : n_struct_(lp.num_vars) {
    const std::size_t m = lp.rows.size();
    std::size_t n_slack = 0;
    std::size_t n_art = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const bool flip = lp.rhs[i] < 0.0;
      const RowSense s = effective_sense(lp.senses[i], flip);
      if (s != RowSense::equal) ++n_slack;
      if (s != RowSense::less_equal) ++n_art;
    }
    art_begin_ = n_struct_ + n_slack;
    cols_ = art_begin_ + n_art;
    tab_.assign(m, std::vector<double>(cols_ + 1, 0.0));
    basis_.assign(m, 0);
    banned_.assign(cols_, false);

    std::size_t slack = n_struct_;
    std::size_t art = art_begin_;
    for (std::size_t i = 0; i < m; ++i) {
      const bool flip = lp.rhs[i] < 0.0;
      const double sign = flip ? -1.0 : 1.0;
      const RowSense s = effective_sense(lp.senses[i], flip);
      for (std::size_t j = 0; j < n_struct_; ++j) tab_[i][j] = sign * lp.rows[i][j];
      tab_[i][cols_] = sign * lp.rhs[i];
      if (s == RowSense::less_equal) {
        tab_[i][slack] = 1.0;
        basis_[i] = slack++;
      } else {
        if (s == RowSense::greater_equal) tab_[i][slack++] = -1.0;
        tab_[i][art] = 1.0;
        basis_[i] = art++;
      }
    }

    // phase 1: drive the artificial variables to zero
    std::vector<double> phase1(cols_, 0.0);
    for (std::size_t j = art_begin_; j < cols_; ++j) phase1[j] = 1.0;
    const double infeasibility = optimize(phase1);
    double scale = 1.0;
    for (const auto& row : tab_) scale = std::max(scale, std::abs(row[cols_]));
    if (infeasibility > 1e-9 * scale) fail(ErrorKind::infeasible, "linear program is infeasible");

    for (std::size_t j = art_begin_; j < cols_; ++j) banned_[j] = true;
    evict_artificials();
  }

  // Minimizes cost (structural variables only) over the current feasible set
  // and returns the optimal value.
  double minimize(std::span<const double> cost) {
    require(cost.size() == n_struct_, ErrorKind::shape_mismatch, "LP cost width mismatch");
    std::vector<double> full(cols_, 0.0);
    std::copy(cost.begin(), cost.end(), full.begin());
    return optimize(full);
  }

  // Bans every nonbasic column whose reduced cost under the last objective is
  // positive; later objectives then range over the optimal face only.
  void restrict_to_optimal_face() {
    double scale = 1.0;
    for (double r : reduced_) scale = std::max(scale, std::abs(r));
    std::vector<bool> is_basic(cols_, false);
    for (std::size_t b : basis_) is_basic[b] = true;
    for (std::size_t j = 0; j < cols_; ++j)
      if (!is_basic[j] && reduced_[j] > 1e-9 * scale) banned_[j] = true;
  }

  std::vector<double> solution() const {
    std::vector<double> x(n_struct_, 0.0);
    for (std::size_t i = 0; i < basis_.size(); ++i)
      if (basis_[i] < n_struct_) x[basis_[i]] = tab_[i][cols_];
    return x;
  }

  std::size_t pivots() const noexcept { return pivots_; }

 private:
  static RowSense effective_sense(RowSense s, bool flip) {
    if (!flip || s == RowSense::equal) return s;
    return s == RowSense::less_equal ? RowSense::greater_equal : RowSense::less_equal;
  }

  double optimize(const std::vector<double>& cost) {
    // reduced costs r_j = c_j - c_B' B^-1 A_j; the tableau already holds B^-1 A
    reduced_.assign(cols_ + 1, 0.0);
    for (std::size_t j = 0; j <= cols_; ++j) reduced_[j] = j < cols_ ? cost[j] : 0.0;
    for (std::size_t i = 0; i < tab_.size(); ++i) {
      const double cb = cost[basis_[i]];
      if (cb == 0.0) continue;
      for (std::size_t j = 0; j <= cols_; ++j) reduced_[j] -= cb * tab_[i][j];
    }

    const std::size_t limit = 50 * (tab_.size() + cols_) + 1000;
    for (std::size_t iter = 0;; ++iter) {
      require(iter < limit, ErrorKind::numeric_overflow, "simplex iteration limit reached");
      // Bland: lowest-index improving column
      std::size_t enter = cols_;
      for (std::size_t j = 0; j < cols_; ++j) {
        if (banned_[j]) continue;
        if (reduced_[j] < -kTol) {
          enter = j;
          break;
        }
      }
      if (enter == cols_) break;

      std::size_t leave = tab_.size();
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < tab_.size(); ++i) {
        const double a = tab_[i][enter];
        if (a <= kTol) continue;
        const double ratio = std::max(tab_[i][cols_], 0.0) / a;
        if (leave == tab_.size() || ratio < best - kTol) {
          best = ratio;
          leave = i;
        } else if (ratio <= best + kTol && basis_[i] < basis_[leave]) {
          best = std::min(best, ratio);
          leave = i;
        }
      }
      if (leave == tab_.size()) fail(ErrorKind::domain, "linear program is unbounded");
      pivot(leave, enter);
    }
    return -reduced_[cols_];
  }

  void pivot(std::size_t row, std::size_t col) {
    ++pivots_;
    auto& pr = tab_[row];
    const double p = pr[col];
    for (auto& v : pr) v /= p;
    pr[col] = 1.0;
    for (std::size_t i = 0; i < tab_.size(); ++i) {
      if (i == row) continue;
      const double f = tab_[i][col];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j <= cols_; ++j) tab_[i][j] -= f * pr[j];
      tab_[i][col] = 0.0;
    }
    const double f = reduced_[col];
    if (f != 0.0) {
      for (std::size_t j = 0; j <= cols_; ++j) reduced_[j] -= f * pr[j];
      reduced_[col] = 0.0;
    }
    basis_[row] = col;
  }

  // Pivots zero-valued artificials out of the basis; rows where that is
  // impossible are redundant and dropped.
  void evict_artificials() {
    for (std::size_t i = 0; i < tab_.size();) {
      if (basis_[i] < art_begin_) {
        ++i;
        continue;
      }
      std::size_t col = art_begin_;
      double best = 1e-9;
      for (std::size_t j = 0; j < art_begin_; ++j) {
        if (std::abs(tab_[i][j]) > best) {
          best = std::abs(tab_[i][j]);
          col = j;
        }
      }
      if (col < art_begin_) {
        reduced_.assign(cols_ + 1, 0.0);
        pivot(i, col);
        ++i;
      } else {
        tab_.erase(tab_.begin() + static_cast<std::ptrdiff_t>(i));
        basis_.erase(basis_.begin() + static_cast<std::ptrdiff_t>(i));
      }
    }
  }

  std::size_t n_struct_;
  std::size_t art_begin_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::vector<double>> tab_;  // m x (cols + 1), last column = rhs
  std::vector<std::size_t> basis_;
  std::vector<bool> banned_;
  std::vector<double> reduced_;
  std::size_t pivots_ = 0;
};

}  // namespace feddd
