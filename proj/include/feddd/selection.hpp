#pragma once

// Uploaded-parameter selection: importance indices, coverage rates and
// layer-wise top-k unit masks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "feddd/error.hpp"
#include "feddd/model.hpp"

namespace feddd {

// CR(k) per global unit, layer by layer.
struct CoverageTable {
  std::vector<std::vector<double>> rate;

  double at(std::size_t layer, std::size_t unit) const { return rate.at(layer).at(unit); }
};

inline CoverageTable coverage_table(std::span<const SubModelSpec> specs, const ModelShape& global) {
  require(!specs.empty(), ErrorKind::config, "coverage needs at least one client");
  CoverageTable table;
  for (const auto& layer : global) table.rate.emplace_back(layer.out_units, 0.0);
  for (const auto& spec : specs) {
    validate_spec(spec, global);
    for (std::size_t l = 0; l < global.size(); ++l)
      for (std::size_t u = 0; u < spec.widths[l]; ++u) table.rate[l][u] += 1.0;
  }
  const double n = static_cast<double>(specs.size());
  for (auto& layer : table.rate)
    for (auto& r : layer) r /= n;
  return table;
}

enum class SelectionKind { feddd, random, max, delta, ordered };

inline SelectionKind selection_kind_from_string(std::string_view s) {
  if (s == "feddd") return SelectionKind::feddd;
  if (s == "random") return SelectionKind::random;
  if (s == "max") return SelectionKind::max;
  if (s == "delta") return SelectionKind::delta;
  if (s == "ordered") return SelectionKind::ordered;
  fail(ErrorKind::config, "unknown selection strategy '" + std::string(s) + "'");
}

inline std::string_view to_string(SelectionKind k) {
  switch (k) {
    case SelectionKind::feddd: return "feddd";
    case SelectionKind::random: return "random";
    case SelectionKind::max: return "max";
    case SelectionKind::delta: return "delta";
    case SelectionKind::ordered: return "ordered";
  }
  return "feddd";
}

struct SelectionStrategy {
  SelectionKind kind = SelectionKind::feddd;
  std::uint64_t seed = 0;
};

// Per unit scores, layer by layer.
using UnitScores = std::vector<std::vector<double>>;
using ImportanceVector = UnitScores;

constexpr double kDivisionClamp = 1e-8;

// Euclidean norm over the unit's group (incoming row + bias) of
// dW * (W + dW) / W, with |W| < 1e-8 clamped to +-1e-8. When `coverage` is
// given the norm is divided by CR(k).
inline ImportanceVector importance(const LayeredModel& before, const LayeredModel& after,
                                   const CoverageTable* coverage = nullptr) {
  require(before.shape() == after.shape(), ErrorKind::shape_mismatch, "importance: model shapes differ");
  const auto& shape = before.shape();
  const auto w = before.params();
  const auto w_hat = after.params();
  ImportanceVector out;
  for (std::size_t l = 0; l < shape.size(); ++l) {
    auto& layer = out.emplace_back(shape[l].out_units, 0.0);
    for (std::size_t u = 0; u < shape[l].out_units; ++u) {
      double sq = 0.0;
      before.for_each_unit_param(l, u, [&](std::size_t j) {
        double denom = w[j];
        if (std::abs(denom) < kDivisionClamp) denom = std::signbit(denom) ? -kDivisionClamp : kDivisionClamp;
        const double dw = w_hat[j] - w[j];
        const double v = dw * w_hat[j] / denom;
        sq += v * v;
      });
      layer[u] = std::sqrt(sq);
      if (coverage != nullptr) {
        const double cr = coverage->at(l, u);
        require(cr > 0.0, ErrorKind::domain, "unit with zero coverage inside a sub-model");
        layer[u] /= cr;
      }
    }
  }
  return out;
}

inline std::size_t upload_quota(std::size_t units, double dropout) {
  return static_cast<std::size_t>(std::lround(static_cast<double>(units) * (1.0 - dropout)));
}

struct SelectionOptions {
  // Keep every unit of the output layer regardless of the dropout rate.
  bool exempt_output_layer = false;
};

// Keeps round(N_l (1 - D)) units per layer, highest score first, ties broken
// by ascending unit index.
inline UnitMask select_top(const UnitScores& scores, double dropout, const SelectionOptions& opt = {}) {
  require(dropout >= 0.0 && dropout <= 1.0, ErrorKind::range,
          "dropout rate " + std::to_string(dropout) + " outside [0, 1]");
  UnitMask mask;
  std::vector<std::size_t> order;
  for (std::size_t l = 0; l < scores.size(); ++l) {
    const auto& s = scores[l];
    auto& bits = mask.layers.emplace_back(s.size(), 0);
    const bool keep_all = opt.exempt_output_layer && l + 1 == scores.size();
    const std::size_t quota = keep_all ? s.size() : upload_quota(s.size(), dropout);
    order.resize(s.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    for (std::size_t k = 0; k < quota; ++k) bits[order[k]] = 1;
  }
  return mask;
}

inline UnitScores group_norms(const LayeredModel& model, std::span<const double> values) {
  const auto& shape = model.shape();
  UnitScores out;
  for (std::size_t l = 0; l < shape.size(); ++l) {
    auto& layer = out.emplace_back(shape[l].out_units, 0.0);
    for (std::size_t u = 0; u < shape[l].out_units; ++u) {
      double sq = 0.0;
      model.for_each_unit_param(l, u, [&](std::size_t j) { sq += values[j] * values[j]; });
      layer[u] = std::sqrt(sq);
    }
  }
  return out;
}

// Scores a client's units under `strategy`; before/after are the client's
// sub-model around local training.
inline UnitScores selection_scores(const SelectionStrategy& strategy, const LayeredModel& before,
                                   const LayeredModel& after, const CoverageTable* coverage = nullptr) {
  require(before.shape() == after.shape(), ErrorKind::shape_mismatch, "selection: model shapes differ");
  const auto& shape = before.shape();
  switch (strategy.kind) {
    case SelectionKind::feddd:
      return importance(before, after, coverage);
    case SelectionKind::max:
      return group_norms(after, after.params());
    case SelectionKind::delta: {
      std::vector<double> delta(after.size());
      for (std::size_t j = 0; j < delta.size(); ++j) delta[j] = after.params()[j] - before.params()[j];
      return group_norms(after, delta);
    }
    case SelectionKind::random: {
      std::mt19937_64 rng(strategy.seed);
      UnitScores out;
      for (const auto& layer : shape) {
        auto& s = out.emplace_back(layer.out_units);
        std::iota(s.begin(), s.end(), 0.0);
        std::shuffle(s.begin(), s.end(), rng);
      }
      return out;
    }
    case SelectionKind::ordered: {
      UnitScores out;
      for (const auto& layer : shape) {
        auto& s = out.emplace_back(layer.out_units);
        for (std::size_t u = 0; u < s.size(); ++u) s[u] = -static_cast<double>(u);
      }
      return out;
    }
  }
  return {};
}

inline UnitMask select_mask(const SelectionStrategy& strategy, const LayeredModel& before, const LayeredModel& after,
                            double dropout, const CoverageTable* coverage = nullptr,
                            const SelectionOptions& opt = {}) {
  return select_top(selection_scores(strategy, before, after, coverage), dropout, opt);
}

}  // namespace feddd
