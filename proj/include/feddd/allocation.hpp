#pragma once

// Per-round dropout-rate allocation: client timing model, the contribution
// regularizer and the exact solution of the epigraph linear program
//
//   min  t + delta * sum_n w_n D_n
//   s.t. t >= a_n - k_n D_n,  0 <= D_n <= D_max,
//        sum_n U_n D_n = (1 - A_server) * sum_n U_n
//
// where a_n is the client's full-model round time and k_n its communication
// time, so a_n - k_n D_n = t_cmp + U_n (1 - D_n) (1/r_up + 1/r_down).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "feddd/error.hpp"
#include "feddd/lp.hpp"
#include "feddd/model.hpp"

namespace feddd {

// Seconds to process `samples` samples.
inline double compute_latency(double cycles_per_sample, double samples, double cpu_hz) {
  return cycles_per_sample * samples / cpu_hz;
}

// Shannon rate in bit/s.
inline double link_rate(double bandwidth_hz, double power_w, double gain, double noise_w) {
  return bandwidth_hz * std::log2(1.0 + power_w * gain / noise_w);
}

inline double comm_time(double bits, double dropout, double rate) {
  return bits * (1.0 - dropout) / rate;
}

struct ClientProfile {
  double cpu_hz = 1e9;
  double cycles_per_sample = 1e6;
  double samples_per_round = 32;  // b_n: samples processed per round (all local epochs)

  // Shannon mode; ignored when the direct rates below are positive
  double uplink_bandwidth_hz = 1e4;
  double downlink_bandwidth_hz = 1e4;
  double uplink_power_w = 0.1;
  double server_power_w = 1.0;
  double channel_gain = 1.0;
  double noise_w = 0.1;

  double uplink_rate_bps = 0.0;
  double downlink_rate_bps = 0.0;

  double model_bits = 0.0;      // U_n
  double samples = 0.0;         // m_n
  double dist_score = 1.0;      // sum_c min(C dis_c, 1), reported as one scalar
  SubModelSpec spec;

  double uplink_rate() const {
    return uplink_rate_bps > 0.0 ? uplink_rate_bps
                                 : link_rate(uplink_bandwidth_hz, uplink_power_w, channel_gain, noise_w);
  }
  double downlink_rate() const {
    return downlink_rate_bps > 0.0 ? downlink_rate_bps
                                   : link_rate(downlink_bandwidth_hz, server_power_w, channel_gain, noise_w);
  }
  double compute_time() const { return compute_latency(cycles_per_sample, samples_per_round, cpu_hz); }
  double upload_time(double dropout) const { return comm_time(model_bits, dropout, uplink_rate()); }
  double download_time(double dropout) const { return comm_time(model_bits, dropout, downlink_rate()); }
  // t_down + t_cmp + t_up
  double round_time(double dropout) const {
    return download_time(dropout) + compute_time() + upload_time(dropout);
  }
};

inline void validate(const ClientProfile& p) {
  require(p.cpu_hz > 0 && p.cycles_per_sample > 0 && p.samples_per_round >= 0, ErrorKind::config,
          "client compute parameters must be positive");
  require(p.uplink_rate() > 0 && p.downlink_rate() > 0, ErrorKind::config, "client link rates must be positive");
  require(p.model_bits > 0 && p.samples > 0, ErrorKind::config, "client model size and sample count must be positive");
}

// (m_n / m) * dist_score * (U_n / U) * loss
inline double regularizer(const ClientProfile& p, double loss, double global_bits, double total_samples) {
  require(loss >= 0.0, ErrorKind::domain, "training loss must be non-negative");
  return (p.samples / total_samples) * p.dist_score * (p.model_bits / global_bits) * loss;
}

struct AllocInstance {
  std::vector<double> a;  // s
  std::vector<double> k;  // s
  std::vector<double> U;  // bits
  std::vector<double> w;  // regularizer weights re_n
  double delta = 0.0;
  double A_server = 0.6;
  double D_max = 0.8;

  std::size_t size() const noexcept { return a.size(); }

  double budget_dropped() const {  // (1 - A) * sum U
    return (1.0 - A_server) * std::accumulate(U.begin(), U.end(), 0.0);
  }

  double objective(const std::vector<double>& D) const {
    double t = 0.0;
    double reg = 0.0;
    for (std::size_t n = 0; n < size(); ++n) {
      t = std::max(t, a[n] - k[n] * D[n]);
      reg += w[n] * D[n];
    }
    return t + delta * reg;
  }
};

inline void validate(const AllocInstance& inst) {
  const std::size_t n = inst.size();
  require(n >= 1, ErrorKind::config, "allocation needs at least one client");
  require(inst.k.size() == n && inst.U.size() == n && inst.w.size() == n, ErrorKind::shape_mismatch,
          "allocation instance vectors differ in length");
  require(inst.A_server > 0.0 && inst.A_server <= 1.0, ErrorKind::range, "A_server must lie in (0, 1]");
  require(inst.D_max >= 0.0 && inst.D_max <= 1.0, ErrorKind::range, "D_max must lie in [0, 1]");
  require(inst.delta >= 0.0, ErrorKind::range, "delta must be non-negative");
  for (std::size_t i = 0; i < n; ++i) {
    require(inst.k[i] > 0.0 && inst.U[i] > 0.0, ErrorKind::range, "k_n and U_n must be positive");
    require(inst.a[i] >= inst.k[i], ErrorKind::range, "a_n must include k_n");
    require(std::isfinite(inst.w[i]) && inst.w[i] >= 0.0, ErrorKind::range, "weights must be finite and >= 0");
  }
}

inline AllocInstance build_instance(const std::vector<ClientProfile>& clients, const std::vector<double>& weights,
                                    double delta, double A_server, double D_max) {
  require(weights.size() == clients.size(), ErrorKind::shape_mismatch, "one weight per client expected");
  AllocInstance inst;
  inst.delta = delta;
  inst.A_server = A_server;
  inst.D_max = D_max;
  for (const auto& c : clients) {
    const double comm = c.model_bits * (1.0 / c.uplink_rate() + 1.0 / c.downlink_rate());
    inst.a.push_back(c.compute_time() + comm);
    inst.k.push_back(comm);
    inst.U.push_back(c.model_bits);
  }
  inst.w = weights;
  return inst;
}

struct DropoutPlan {
  std::vector<double> D;
  double t_server = 0.0;
  double objective = 0.0;
};

inline void check_feasible(const AllocInstance& inst) {
  if (inst.D_max < 1.0 - inst.A_server - 1e-12)
    fail(ErrorKind::infeasible, "D_max = " + std::to_string(inst.D_max) + " < 1 - A_server = " +
                                    std::to_string(1.0 - inst.A_server) +
                                    ": the upload budget cannot be met even at maximal dropout");
}

// Exact optimum via simplex on the epigraph form. Among optimal vertices the
// lexicographically smallest D is returned.
inline DropoutPlan solve_allocation(const AllocInstance& inst) {
  validate(inst);
  check_feasible(inst);
  const std::size_t N = inst.size();
  const double total = std::accumulate(inst.U.begin(), inst.U.end(), 0.0);
  const double dropped = std::min(1.0 - inst.A_server, inst.D_max);

  // variables: D_0..D_{N-1}, t
  LinearProgram lp;
  lp.num_vars = N + 1;
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> row(N + 1, 0.0);
    row[n] = inst.k[n];
    row[N] = 1.0;
    lp.add_row(std::move(row), RowSense::greater_equal, inst.a[n]);
  }
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> row(N + 1, 0.0);
    row[n] = 1.0;
    lp.add_row(std::move(row), RowSense::less_equal, inst.D_max);
  }
  {
    // budget row normalized by sum U so it is scale-free
    std::vector<double> row(N + 1, 0.0);
    for (std::size_t n = 0; n < N; ++n) row[n] = inst.U[n] / total;
    lp.add_row(std::move(row), RowSense::equal, dropped);
  }

  Simplex simplex(lp);
  std::vector<double> cost(N + 1, 0.0);
  for (std::size_t n = 0; n < N; ++n) cost[n] = inst.delta * inst.w[n];
  cost[N] = 1.0;
  simplex.minimize(cost);
  for (std::size_t n = 0; n < N; ++n) {
    simplex.restrict_to_optimal_face();
    std::fill(cost.begin(), cost.end(), 0.0);
    cost[n] = 1.0;
    simplex.minimize(cost);
  }

  DropoutPlan plan;
  const auto x = simplex.solution();
  plan.D.assign(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(N));
  for (auto& d : plan.D) d = std::clamp(d, 0.0, inst.D_max);
  plan.t_server = 0.0;
  for (std::size_t n = 0; n < N; ++n) plan.t_server = std::max(plan.t_server, inst.a[n] - inst.k[n] * plan.D[n]);
  plan.objective = inst.objective(plan.D);
  return plan;
}

inline nlohmann::json to_json(const AllocInstance& inst) {
  return {{"a", inst.a}, {"k", inst.k}, {"U", inst.U}, {"w", inst.w},
          {"delta", inst.delta}, {"A_server", inst.A_server}, {"D_max", inst.D_max}};
}

inline AllocInstance instance_from_json(const nlohmann::json& j) {
  AllocInstance inst;
  try {
    inst.a = j.at("a").get<std::vector<double>>();
    inst.k = j.at("k").get<std::vector<double>>();
    inst.U = j.at("U").get<std::vector<double>>();
    inst.w = j.contains("w") ? j.at("w").get<std::vector<double>>() : std::vector<double>(inst.a.size(), 0.0);
    inst.delta = j.value("delta", 0.0);
    inst.A_server = j.value("A_server", 0.6);
    inst.D_max = j.value("D_max", 0.8);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("bad allocation instance: ") + e.what());
  }
  validate(inst);
  return inst;
}

inline nlohmann::json to_json(const DropoutPlan& plan) {
  return {{"D", plan.D}, {"t_server", plan.t_server}, {"objective", plan.objective}};
}

}  // namespace feddd
