#pragma once

// Accuracy, time-to-accuracy, convergence-assumption monitors, the
// convergence-bound evaluator and CSV/JSON export of round records.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "feddd/data.hpp"
#include "feddd/error.hpp"
#include "feddd/model.hpp"
#include "feddd/trainer.hpp"

namespace feddd {

struct Accuracy {
  double overall = 0.0;
  std::vector<std::optional<double>> per_class;  // nullopt: class absent from the test set
};

inline Accuracy evaluate(const LayeredModel& model, const LabeledDataset& test) {
  require(test.size() > 0, ErrorKind::insufficient_data, "test set is empty");
  const auto fwd = forward(model, test);
  const std::size_t C = model.shape().back().out_units;
  std::vector<std::size_t> hits(test.classes, 0), seen(test.classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const double* logits = fwd.logits.data() + i * C;
    const auto pred = static_cast<std::size_t>(std::max_element(logits, logits + C) - logits);
    const auto y = static_cast<std::size_t>(test.labels[i]);
    ++seen[y];
    if (pred == y) {
      ++hits[y];
      ++correct;
    }
  }
  Accuracy acc;
  acc.overall = static_cast<double>(correct) / static_cast<double>(test.size());
  for (std::size_t c = 0; c < test.classes; ++c)
    acc.per_class.push_back(seen[c] ? std::optional<double>(static_cast<double>(hits[c]) / seen[c]) : std::nullopt);
  return acc;
}

struct RoundRecord {
  std::size_t round = 0;
  double t_server = 0.0;        // simulated round time (s), per the timing formula
  double t_realized = 0.0;      // round time with realized upload/download sizes (s)
  double cum_time = 0.0;        // s
  double test_acc = 0.0;
  std::vector<std::optional<double>> per_class_acc;
  double mean_loss = 0.0;
  std::vector<double> D;        // continuous dropout rates used this round
  double mean_D = 0.0;
  std::vector<double> realized_upload;  // uploaded fraction of each client's model
  std::vector<bool> participated;
  double uploaded_bits = 0.0;
  double eps = std::numeric_limits<double>::quiet_NaN();           // unweighted, NaN when undefined
  double eps_weighted = std::numeric_limits<double>::quiet_NaN();  // m_n-weighted variant
  double grad_norm = 0.0;       // ||grad F(W^t)|| on the union of client data
  double global_loss = 0.0;     // F(W^t) on the union of client data
};

// First cumulative time at which accuracy >= target.
inline std::optional<double> time_to_accuracy(std::span<const RoundRecord> records, double target) {
  for (const auto& r : records)
    if (r.test_acc >= target) return r.cum_time;
  return std::nullopt;
}

// Scheme time-to-target divided by the baseline's; nullopt when the scheme
// never reaches the target.
inline std::optional<double> t2a(std::span<const RoundRecord> scheme, std::span<const RoundRecord> baseline,
                                 double target) {
  const auto base = time_to_accuracy(baseline, target);
  require(base.has_value(), ErrorKind::undefined, "baseline never reaches the target accuracy");
  require(*base > 0.0, ErrorKind::undefined, "baseline reaches the target at time zero");
  const auto mine = time_to_accuracy(scheme, target);
  if (!mine) return std::nullopt;
  return *mine / *base;
}

// ||masked aggregate - plain mean||^2 / ||plain mean||^2 over client models in
// global coordinates. Uncovered coordinates contribute zero to the masked
// aggregate. nullopt when no coordinate is covered or the mean is zero.
inline std::optional<double> measure_epsilon(std::span<const LayeredModel> models, std::span<const ParamMask> masks,
                                             std::span<const double> weights = {}) {
  require(!models.empty() && models.size() == masks.size(), ErrorKind::shape_mismatch,
          "epsilon needs one mask per model");
  require(weights.empty() || weights.size() == models.size(), ErrorKind::shape_mismatch, "one weight per model");
  const std::size_t P = models.front().size();
  std::vector<double> num(P, 0.0), den(P, 0.0), mean(P, 0.0);
  double wsum = 0.0;
  bool covered = false;
  for (std::size_t n = 0; n < models.size(); ++n) {
    const double w = weights.empty() ? 1.0 : weights[n];
    const auto v = models[n].params();
    require(v.size() == P && masks[n].size() == P, ErrorKind::shape_mismatch, "models differ in size");
    wsum += w;
    for (std::size_t j = 0; j < P; ++j) {
      mean[j] += w * v[j];
      if (masks[n][j]) {
        num[j] += w * v[j];
        den[j] += w;
        covered = true;
      }
    }
  }
  if (!covered) return std::nullopt;
  double diff = 0.0, norm = 0.0;
  for (std::size_t j = 0; j < P; ++j) {
    mean[j] /= wsum;
    const double agg = den[j] > 0.0 ? num[j] / den[j] : 0.0;
    diff += (agg - mean[j]) * (agg - mean[j]);
    norm += mean[j] * mean[j];
  }
  if (norm == 0.0) return std::nullopt;
  return diff / norm;
}

struct BoundParams {
  double L = 1.0;        // smoothness
  double eps = 0.0;      // mask-induced error bound
  double eta = 0.01;     // learning rate
  double h = 1.0;        // full broadcast period
  double K = 1.0;        // number of broadcast periods, T = K h
  std::vector<double> sigma;
  double gap = 1.0;      // F(W^0) - F(W*)
};

struct BoundTerms {
  double optimization = 0.0;  // decays with K h
  double periodic = 0.0;      // grows with h
  double residual = 0.0;
  double total() const { return optimization + periodic + residual; }
};

inline double max_step_size(double L, double eps) { return 2.0 / (L + L * eps + 4.0 * (eps + 1.0) * eps); }

inline BoundTerms convergence_bound_terms(const BoundParams& p) {
  require(p.L > 0.0, ErrorKind::domain, "L must be positive");
  require(p.eps >= 0.0 && p.eps <= 1.0, ErrorKind::domain, "eps must lie in [0, 1]");
  require(p.h >= 1.0 && p.K > 0.0, ErrorKind::domain, "h >= 1 and K > 0 required");
  require(p.eta > 0.0 && p.eta < max_step_size(p.L, p.eps), ErrorKind::domain,
          "step size violates eta < 2 / (L + L eps + 4 (eps + 1) eps)");
  const double L = p.L, e = p.eps, eta = p.eta, h = p.h;
  const double eta2 = eta * eta;
  const double denom = 2.0 * eta - L * eta2 - L * e * eta2 - 4.0 * (e + 1.0) * e * eta2;
  double s2 = 0.0;
  for (double s : p.sigma) s2 += s * s;
  if (!p.sigma.empty()) s2 /= static_cast<double>(p.sigma.size());

  BoundTerms t;
  t.optimization = 2.0 * p.gap / (p.K * h * denom);
  t.periodic = L * e * eta2 * s2 * (h - 1.0) * (2.0 * e + 2.0 * e * eta2 * L * L + 2.0 * eta2 * L * L + 3.0) /
               (h * denom);
  t.residual = L * e * eta2 * s2 / (h * denom);
  return t;
}

inline double convergence_bound(const BoundParams& p) { return convergence_bound_terms(p).total(); }

// sigma_n = ||grad F_n(W) - grad F(W)|| with grad F the m_n-weighted mean of
// the client full-batch gradients.
inline std::vector<double> estimate_sigma(std::span<const LabeledDataset> clients, const LayeredModel& global) {
  require(!clients.empty(), ErrorKind::config, "sigma needs at least one client");
  std::vector<std::vector<double>> grads;
  std::vector<double> mean(global.size(), 0.0);
  double m = 0.0;
  for (const auto& ds : clients) {
    grads.push_back(full_gradient(global, ds));
    const double w = static_cast<double>(ds.size());
    m += w;
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += w * grads.back()[j];
  }
  for (auto& g : mean) g /= m;
  std::vector<double> sigma;
  for (const auto& g : grads) {
    double sq = 0.0;
    for (std::size_t j = 0; j < g.size(); ++j) sq += (g[j] - mean[j]) * (g[j] - mean[j]);
    sigma.push_back(std::sqrt(sq));
  }
  return sigma;
}

struct GradientSnapshot {
  std::vector<double> params;
  std::vector<double> grad;
};

// max ||g_a - g_b|| / ||w_a - w_b|| over consecutive snapshot pairs.
inline double estimate_smoothness(std::span<const GradientSnapshot> snaps) {
  double L = 0.0;
  for (std::size_t i = 1; i < snaps.size(); ++i) {
    double dw = 0.0, dg = 0.0;
    for (std::size_t j = 0; j < snaps[i].params.size(); ++j) {
      dw += std::pow(snaps[i].params[j] - snaps[i - 1].params[j], 2);
      dg += std::pow(snaps[i].grad[j] - snaps[i - 1].grad[j], 2);
    }
    if (dw > 0.0) L = std::max(L, std::sqrt(dg / dw));
  }
  return L;
}

// Bound inputs measured over a run: eps is the largest per-round eps_t, the
// optimality gap uses the smallest observed global loss as a stand-in for
// F(W*). Needs records with global_loss tracked.
inline BoundParams bound_params_from_run(std::span<const RoundRecord> records, std::vector<double> sigma, double L,
                                         double eta, double h) {
  require(!records.empty(), ErrorKind::undefined, "no rounds recorded");
  BoundParams p;
  p.L = L;
  p.eta = eta;
  p.h = h;
  p.K = static_cast<double>(records.size()) / h;
  p.sigma = std::move(sigma);
  p.eps = 0.0;
  double lowest = std::numeric_limits<double>::infinity();
  for (const auto& r : records) {
    if (std::isfinite(r.eps)) p.eps = std::max(p.eps, r.eps);
    if (std::isfinite(r.global_loss)) lowest = std::min(lowest, r.global_loss);
  }
  require(std::isfinite(records.front().global_loss) && std::isfinite(lowest), ErrorKind::undefined,
          "global loss was not tracked");
  p.gap = records.front().global_loss - lowest;
  return p;
}

inline constexpr const char* kRoundsCsvHeader = "round,t_server_s,cum_time_s,test_acc,mean_loss,eps_t,uploaded_bits,mean_D";

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string rounds_csv(std::span<const RoundRecord> records) {
  std::string out = kRoundsCsvHeader;
  out += '\n';
  for (const auto& r : records) {
    out += std::to_string(r.round);
    for (double v : {r.t_server, r.cum_time, r.test_acc, r.mean_loss, r.eps, r.uploaded_bits, r.mean_D}) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

// Inverse of rounds_csv for the numeric columns.
inline std::vector<RoundRecord> parse_rounds_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == kRoundsCsvHeader, ErrorKind::config,
          "unexpected rounds.csv header");
  std::vector<RoundRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    require(cells.size() == 8, ErrorKind::config, "rounds.csv row has " + std::to_string(cells.size()) + " cells");
    RoundRecord r;
    r.round = std::stoull(cells[0]);
    auto num = [](const std::string& s) { return s == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(s); };
    r.t_server = num(cells[1]);
    r.cum_time = num(cells[2]);
    r.test_acc = num(cells[3]);
    r.mean_loss = num(cells[4]);
    r.eps = num(cells[5]);
    r.uploaded_bits = num(cells[6]);
    r.mean_D = num(cells[7]);
    out.push_back(r);
  }
  return out;
}

inline nlohmann::json optional_vector_json(const std::vector<std::optional<double>>& v) {
  auto out = nlohmann::json::array();
  for (const auto& x : v) out.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
  return out;
}

inline nlohmann::json nan_as_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path.string());
}

// Writes rounds.csv and summary.json into `dir` (created if missing).
inline void export_records(std::span<const RoundRecord> records, const std::filesystem::path& dir,
                           const nlohmann::json& summary_extra = nlohmann::json::object()) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "rounds.csv", rounds_csv(records));

  nlohmann::json summary = summary_extra;
  if (!records.empty()) {
    const auto& last = records.back();
    summary["final_accuracy"] = last.test_acc;
    summary["final_per_class_accuracy"] = optional_vector_json(last.per_class_acc);
    summary["total_time_s"] = last.cum_time;
  }
  auto rounds = nlohmann::json::array();
  for (const auto& r : records) {
    rounds.push_back({{"round", r.round},
                      {"D", r.D},
                      {"realized_upload", r.realized_upload},
                      {"per_class_acc", optional_vector_json(r.per_class_acc)},
                      {"t_realized_s", r.t_realized},
                      {"eps_weighted", nan_as_null(r.eps_weighted)},
                      {"grad_norm", nan_as_null(r.grad_norm)},
                      {"global_loss", nan_as_null(r.global_loss)}});
  }
  summary["rounds"] = std::move(rounds);
  write_text(dir / "summary.json", summary.dump(2) + "\n");
}

}  // namespace feddd
