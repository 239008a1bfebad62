#pragma once

// Masked weighted aggregation, the periodic full-model broadcast and the
// client-side reconciliation of sparse and full downloads.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "feddd/error.hpp"
#include "feddd/model.hpp"

namespace feddd {

// One client's contribution, already in global coordinates.
struct Upload {
  const LayeredModel* model = nullptr;
  const ParamMask* mask = nullptr;
  double weight = 1.0;  // m_n, or 1 for equal weighting
};

// W[j] = sum_n m_n W_n[j] M_n[j] / sum_n m_n M_n[j]; coordinates nobody
// uploaded keep their previous value. Clients are reduced in the order
// given, which callers keep ascending by client id.
inline LayeredModel aggregate(std::span<const Upload> uploads, const LayeredModel& previous) {
  require(!uploads.empty(), ErrorKind::empty_round, "aggregation received no uploads");
  double total_weight = 0.0;
  for (const auto& u : uploads) {
    require(u.model != nullptr && u.mask != nullptr, ErrorKind::shape_mismatch, "incomplete upload");
    require(u.model->shape() == previous.shape() && u.mask->size() == previous.size(), ErrorKind::shape_mismatch,
            "upload is not in global coordinates");
    require(u.weight >= 0.0, ErrorKind::range, "negative aggregation weight");
    total_weight += u.weight;
  }
  require(total_weight > 0.0, ErrorKind::empty_round, "aggregation weights sum to zero");

  const std::size_t P = previous.size();
  std::vector<double> den(P, 0.0);
  for (const auto& u : uploads) {
    const auto& mask = *u.mask;
    for (std::size_t j = 0; j < P; ++j)
      if (mask[j]) den[j] += u.weight;
  }
  // sum_n (m_n / den) W_n, so a lone contributor is copied exactly
  std::vector<double> acc(P, 0.0);
  for (const auto& u : uploads) {
    const auto values = u.model->params();
    const auto& mask = *u.mask;
    for (std::size_t j = 0; j < P; ++j)
      if (mask[j]) acc[j] += (u.weight / den[j]) * values[j];
  }
  LayeredModel out = previous;
  auto w = out.params();
  for (std::size_t j = 0; j < P; ++j)
    if (den[j] > 0.0) w[j] = acc[j];
  return out;
}

struct BroadcastPolicy {
  std::size_t period = 5;  // h

  bool full_round(std::size_t round) const { return round % period == 0; }
};

struct Payload {
  LayeredModel values;  // global coordinates; zero outside the support
  ParamMask support;
  bool full = false;
  std::size_t param_count = 0;  // parameters actually sent
};

// Rounds with t mod h == 0 send the full model (charged at the client's own
// sub-model size); other rounds send W^t restricted to the client's mask.
inline Payload broadcast(const LayeredModel& global, const ParamMask& client_mask, const ParamMask& occupancy,
                         std::size_t round, const BroadcastPolicy& policy) {
  require(round >= 1, ErrorKind::range, "rounds are numbered from 1");
  require(policy.period >= 1, ErrorKind::config, "broadcast period must be >= 1");
  require(client_mask.size() == global.size() && occupancy.size() == global.size(), ErrorKind::shape_mismatch,
          "broadcast mask is not in global coordinates");
  Payload p{global, {}, policy.full_round(round), 0};
  if (p.full) {
    p.support = ParamMask(global.size(), 1);
    p.param_count = popcount(occupancy);
    return p;
  }
  p.support = client_mask;
  auto v = p.values.params();
  for (std::size_t j = 0; j < v.size(); ++j)
    if (!client_mask[j]) v[j] = 0.0;
  p.param_count = popcount(client_mask);
  return p;
}

// Flat form: out = global * M + local * (1 - M).
inline std::vector<double> merge_masked(std::span<const double> global, std::span<const std::uint8_t> mask,
                                        std::span<const double> local) {
  require(global.size() == local.size() && mask.size() == local.size(), ErrorKind::shape_mismatch,
          "merge operands differ in length");
  std::vector<double> out(local.begin(), local.end());
  for (std::size_t j = 0; j < out.size(); ++j)
    if (mask[j]) out[j] = global[j];
  return out;
}

// Next local model of a client holding sub-model `spec`. `local` is the
// client's post-training model and `mask` its global-coordinate upload mask.
inline LayeredModel local_update(const LayeredModel& local, const Payload& payload, const ParamMask& mask,
                                 const SubModelSpec& spec) {
  const auto& global_shape = payload.values.shape();
  require(local.shape() == sub_shape(spec, global_shape), ErrorKind::shape_mismatch,
          "local model does not match its sub-model spec");
  const LayeredModel incoming = extract(payload.values, spec);
  if (payload.full) return incoming;

  require(mask.size() == payload.values.size(), ErrorKind::shape_mismatch, "mask is not in global coordinates");
  const auto map = global_index_map(spec, global_shape);
  ParamMask sub_mask(map.size(), 0);
  for (std::size_t i = 0; i < map.size(); ++i) sub_mask[i] = mask[map[i]];
  return LayeredModel(local.shape(), merge_masked(incoming.params(), sub_mask, local.params()));
}

// Global model plus every client's unit mask, in the checkpoint format.
inline void write_round_checkpoint(const std::string& path, std::size_t round, const LayeredModel& global,
                                   const std::vector<UnitMask>& masks) {
  auto jm = nlohmann::json::array();
  for (const auto& m : masks) jm.push_back(unit_mask_to_json(m));
  write_checkpoint(path, global, {{"round", round}, {"masks", jm}});
}

struct RoundCheckpoint {
  std::size_t round = 0;
  LayeredModel global;
  std::vector<UnitMask> masks;
};

inline RoundCheckpoint read_round_checkpoint(const std::string& path) {
  auto ck = read_checkpoint(path);
  RoundCheckpoint out{ck.extra.value("round", std::size_t{0}), std::move(ck.model), {}};
  if (ck.extra.contains("masks"))
    for (const auto& m : ck.extra.at("masks")) out.masks.push_back(unit_mask_from_json(m));
  return out;
}

}  // namespace feddd
