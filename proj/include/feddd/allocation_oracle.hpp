#pragma once

// Brute-force reference solutions for small allocation instances. Both
// routes are independent of the simplex solver:
//  - grid search over D_1..D_{N-1} on a fixed step with D_N solved from the
//    budget equality (an upper bound on the optimum, off by the grid error);
//  - exhaustive enumeration of every vertex of the feasible polytope
//    (exact, since a bounded LP attains its optimum at a vertex).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "feddd/allocation.hpp"
#include "feddd/error.hpp"

namespace feddd {

struct OracleSolution {
  std::vector<double> D;
  double objective = std::numeric_limits<double>::infinity();
  std::size_t evaluated = 0;

  bool found() const { return std::isfinite(objective); }
};

inline OracleSolution grid_oracle(const AllocInstance& inst, double step) {
  validate(inst);
  require(step > 0.0, ErrorKind::domain, "grid step must be positive");
  const std::size_t N = inst.size();
  const double total = std::accumulate(inst.U.begin(), inst.U.end(), 0.0);
  const double dropped = (1.0 - inst.A_server) * total;

  std::vector<double> grid;
  const auto steps = static_cast<std::size_t>(std::floor(inst.D_max / step + 1e-9));
  for (std::size_t i = 0; i <= steps; ++i) grid.push_back(static_cast<double>(i) * step);
  if (inst.D_max - grid.back() > 1e-12) grid.push_back(inst.D_max);

  OracleSolution best;
  std::vector<double> D(N, 0.0);
  const double tol = 1e-12;

  // depth-first over the first N-1 coordinates
  auto recurse = [&](auto&& self, std::size_t n, double used, double time_max, double reg) -> void {
    if (n + 1 == N) {
      const double last = (dropped - used) / inst.U[n];
      if (last < -tol || last > inst.D_max + tol) return;
      D[n] = std::clamp(last, 0.0, inst.D_max);
      const double t = std::max(time_max, inst.a[n] - inst.k[n] * D[n]);
      const double obj = t + inst.delta * (reg + inst.w[n] * D[n]);
      ++best.evaluated;
      if (obj < best.objective) {
        best.objective = obj;
        best.D = D;
      }
      return;
    }
    for (double d : grid) {
      const double next_used = used + inst.U[n] * d;
      if (next_used > dropped + tol * total) break;
      D[n] = d;
      self(self, n + 1, next_used, std::max(time_max, inst.a[n] - inst.k[n] * d), reg + inst.w[n] * d);
    }
  };
  recurse(recurse, 0, 0.0, 0.0, 0.0);
  return best;
}

namespace detail {

// Gaussian elimination with partial pivoting; nullopt when singular.
inline std::optional<std::vector<double>> solve_dense(std::vector<std::vector<double>> A, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(A[r][c]) > std::abs(A[piv][c])) piv = r;
    if (std::abs(A[piv][c]) < 1e-12) return std::nullopt;
    std::swap(A[piv], A[c]);
    std::swap(b[piv], b[c]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = A[r][c] / A[c][c];
      if (f == 0.0) continue;
      for (std::size_t k = c; k < n; ++k) A[r][k] -= f * A[c][k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t r = n; r-- > 0;) {
    double s = b[r];
    for (std::size_t k = r + 1; k < n; ++k) s -= A[r][k] * x[k];
    x[r] = s / A[r][r];
  }
  return x;
}

}  // namespace detail

// Every choice of N active constraints among {t = a_n - k_n D_n, D_n = 0,
// D_n = D_max}, together with the budget equality, is solved for (D, t) and
// kept when feasible. Cost grows as C(3N, N); intended for N <= 6.
inline OracleSolution vertex_oracle(const AllocInstance& inst) {
  validate(inst);
  const std::size_t N = inst.size();
  const double total = std::accumulate(inst.U.begin(), inst.U.end(), 0.0);
  const double dropped = (1.0 - inst.A_server) * total;
  const std::size_t M = 3 * N;

  // constraint j as a row over (D_0..D_{N-1}, t) with its rhs
  auto constraint = [&](std::size_t j, std::vector<double>& row, double& rhs) {
    std::fill(row.begin(), row.end(), 0.0);
    const std::size_t n = j % N;
    switch (j / N) {
      case 0: row[n] = inst.k[n]; row[N] = 1.0; rhs = inst.a[n]; break;
      case 1: row[n] = 1.0; rhs = 0.0; break;
      default: row[n] = 1.0; rhs = inst.D_max; break;
    }
  };

  OracleSolution best;
  std::vector<std::size_t> pick(N);
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  std::vector<double> row(N + 1);
  const double feas_tol = 1e-9;
  while (true) {
    std::vector<std::vector<double>> A;
    std::vector<double> b;
    for (std::size_t j : pick) {
      double rhs = 0.0;
      constraint(j, row, rhs);
      A.push_back(row);
      b.push_back(rhs);
    }
    std::vector<double> eq(N + 1, 0.0);
    for (std::size_t n = 0; n < N; ++n) eq[n] = inst.U[n] / total;
    A.push_back(eq);
    b.push_back(dropped / total);

    if (auto x = detail::solve_dense(std::move(A), std::move(b))) {
      const auto& v = *x;
      bool ok = true;
      for (std::size_t n = 0; n < N && ok; ++n) {
        ok = v[n] >= -feas_tol && v[n] <= inst.D_max + feas_tol &&
             v[N] >= inst.a[n] - inst.k[n] * v[n] - feas_tol * std::max(1.0, inst.a[n]);
      }
      if (ok) {
        std::vector<double> D(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(N));
        for (auto& d : D) d = std::clamp(d, 0.0, inst.D_max);
        const double obj = inst.objective(D);
        ++best.evaluated;
        if (obj < best.objective) {
          best.objective = obj;
          best.D = D;
        }
      }
    }

    // next combination of N out of M
    std::size_t i = N;
    while (i > 0 && pick[i - 1] == M - N + i - 1) --i;
    if (i == 0) break;
    ++pick[i - 1];
    for (std::size_t j = i; j < N; ++j) pick[j] = pick[j - 1] + 1;
  }
  return best;
}

struct OracleReport {
  OracleSolution grid;
  OracleSolution vertex;

  const OracleSolution& best() const { return vertex.objective <= grid.objective ? vertex : grid; }
};

inline OracleReport allocation_oracle(const AllocInstance& inst, double grid_step) {
  check_feasible(inst);
  return {grid_oracle(inst, grid_step), vertex_oracle(inst)};
}

}  // namespace feddd
