#pragma once

// Dense layered models, nested sub-model geometry and unit masks.
//
// Parameters of a model live in one flat vector. Layer l occupies
// [weight block out_l x in_l, row-major][bias block out_l], so the incoming
// row and the bias of a unit are the unit's parameter group.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "feddd/error.hpp"

namespace feddd {

struct LayerShape {
  std::size_t in_units = 1;
  std::size_t out_units = 1;
  bool has_bias = true;

  std::size_t param_count() const noexcept {
    return in_units * out_units + (has_bias ? out_units : 0);
  }
  // parameters carried by one output unit
  std::size_t unit_size() const noexcept { return in_units + (has_bias ? 1 : 0); }

  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

using ModelShape = std::vector<LayerShape>;

inline void validate_shape(const ModelShape& shape) {
  require(!shape.empty(), ErrorKind::shape_mismatch, "model has no layers");
  for (std::size_t l = 0; l < shape.size(); ++l) {
    require(shape[l].in_units >= 1 && shape[l].out_units >= 1, ErrorKind::shape_mismatch,
            "layer " + std::to_string(l) + " has a zero dimension");
    if (l + 1 < shape.size())
      require(shape[l].out_units == shape[l + 1].in_units, ErrorKind::shape_mismatch,
              "layer " + std::to_string(l) + " output does not feed layer " + std::to_string(l + 1));
  }
}

inline std::size_t param_count(const ModelShape& shape) {
  std::size_t total = 0;
  for (const auto& layer : shape) total += layer.param_count();
  return total;
}

// MLP with ReLU hidden layers: dims = {input, hidden..., classes}.
inline ModelShape mlp_shape(std::span<const std::size_t> dims) {
  require(dims.size() >= 2, ErrorKind::shape_mismatch, "an MLP needs at least input and output dims");
  ModelShape shape;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) shape.push_back({dims[i], dims[i + 1], true});
  validate_shape(shape);
  return shape;
}

inline ModelShape mlp_shape(std::initializer_list<std::size_t> dims) {
  return mlp_shape(std::span<const std::size_t>(dims.begin(), dims.size()));
}

class LayeredModel {
 public:
  LayeredModel() = default;

  explicit LayeredModel(ModelShape shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    offsets_.reserve(shape_.size() + 1);
    std::size_t off = 0;
    for (const auto& layer : shape_) {
      offsets_.push_back(off);
      off += layer.param_count();
    }
    offsets_.push_back(off);
    params_.assign(off, 0.0);
  }

  LayeredModel(ModelShape shape, std::vector<double> params) : LayeredModel(std::move(shape)) {
    require(params.size() == params_.size(), ErrorKind::shape_mismatch,
            "parameter vector length " + std::to_string(params.size()) + " != " +
                std::to_string(params_.size()));
    params_ = std::move(params);
  }

  const ModelShape& shape() const noexcept { return shape_; }
  std::size_t num_layers() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return params_.size(); }

  std::span<double> params() noexcept { return params_; }
  std::span<const double> params() const noexcept { return params_; }

  std::size_t layer_offset(std::size_t l) const { return offsets_.at(l); }
  std::size_t bias_offset(std::size_t l) const {
    return offsets_.at(l) + shape_[l].in_units * shape_[l].out_units;
  }

  std::span<double> weights(std::size_t l) {
    return {params_.data() + offsets_.at(l), shape_[l].in_units * shape_[l].out_units};
  }
  std::span<const double> weights(std::size_t l) const {
    return {params_.data() + offsets_.at(l), shape_[l].in_units * shape_[l].out_units};
  }
  std::span<double> bias(std::size_t l) {
    return {params_.data() + bias_offset(l), shape_[l].has_bias ? shape_[l].out_units : 0};
  }
  std::span<const double> bias(std::size_t l) const {
    return {params_.data() + bias_offset(l), shape_[l].has_bias ? shape_[l].out_units : 0};
  }

  double& weight(std::size_t l, std::size_t out, std::size_t in) {
    return params_[offsets_.at(l) + out * shape_[l].in_units + in];
  }
  double weight(std::size_t l, std::size_t out, std::size_t in) const {
    return params_[offsets_.at(l) + out * shape_[l].in_units + in];
  }

  // Flat indices of the parameter group owned by unit `unit` of layer `l`:
  // its incoming weight row followed by its bias entry.
  template <typename F>
  void for_each_unit_param(std::size_t l, std::size_t unit, F&& f) const {
    const std::size_t row = offsets_.at(l) + unit * shape_[l].in_units;
    for (std::size_t i = 0; i < shape_[l].in_units; ++i) f(row + i);
    if (shape_[l].has_bias) f(bias_offset(l) + unit);
  }

  bool all_finite() const {
    for (double v : params_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const LayeredModel& a, const LayeredModel& b) {
    return a.shape_ == b.shape_ && a.params_ == b.params_;
  }

 private:
  ModelShape shape_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

// Kept output units per layer. Sub-models are nested prefixes: layer l of the
// sub-model holds units [0, widths[l]) of global layer l. The output layer is
// never shrunk.
struct SubModelSpec {
  std::vector<std::size_t> widths;

  static SubModelSpec full(const ModelShape& global) {
    SubModelSpec spec;
    for (const auto& layer : global) spec.widths.push_back(layer.out_units);
    return spec;
  }

  static SubModelSpec from_hidden(const ModelShape& global, std::vector<std::size_t> hidden) {
    SubModelSpec spec{std::move(hidden)};
    spec.widths.push_back(global.back().out_units);
    return spec;
  }

  bool is_full(const ModelShape& global) const { return *this == full(global); }

  friend bool operator==(const SubModelSpec&, const SubModelSpec&) = default;
};

inline void validate_spec(const SubModelSpec& spec, const ModelShape& global) {
  require(spec.widths.size() == global.size(), ErrorKind::invalid_spec,
          "sub-model spec has " + std::to_string(spec.widths.size()) + " layers, global has " +
              std::to_string(global.size()));
  for (std::size_t l = 0; l < global.size(); ++l) {
    require(spec.widths[l] >= 1, ErrorKind::invalid_spec,
            "layer " + std::to_string(l) + " keeps zero units");
    require(spec.widths[l] <= global[l].out_units, ErrorKind::invalid_spec,
            "layer " + std::to_string(l) + " width " + std::to_string(spec.widths[l]) +
                " exceeds global width " + std::to_string(global[l].out_units));
  }
  require(spec.widths.back() == global.back().out_units, ErrorKind::invalid_spec,
          "the output layer cannot be shrunk");
}

inline ModelShape sub_shape(const SubModelSpec& spec, const ModelShape& global) {
  validate_spec(spec, global);
  ModelShape shape;
  for (std::size_t l = 0; l < global.size(); ++l)
    shape.push_back({l == 0 ? global[0].in_units : spec.widths[l - 1], spec.widths[l], global[l].has_bias});
  return shape;
}

inline std::size_t param_count(const SubModelSpec& spec, const ModelShape& global) {
  return param_count(sub_shape(spec, global));
}

// Global flat index of every sub-model parameter, in sub-model order.
inline std::vector<std::size_t> global_index_map(const SubModelSpec& spec, const ModelShape& global) {
  const ModelShape local = sub_shape(spec, global);
  const LayeredModel g(global);
  std::vector<std::size_t> map;
  map.reserve(param_count(local));
  for (std::size_t l = 0; l < local.size(); ++l) {
    for (std::size_t o = 0; o < local[l].out_units; ++o)
      for (std::size_t i = 0; i < local[l].in_units; ++i)
        map.push_back(g.layer_offset(l) + o * global[l].in_units + i);
    if (local[l].has_bias)
      for (std::size_t o = 0; o < local[l].out_units; ++o) map.push_back(g.bias_offset(l) + o);
  }
  return map;
}

// Flat per-parameter indicator (1 = present / uploaded).
using ParamMask = std::vector<std::uint8_t>;

inline std::size_t popcount(const ParamMask& mask) {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

struct EmbeddedModel {
  LayeredModel model;
  ParamMask mask;  // occupied global coordinates
};

inline EmbeddedModel embed(const LayeredModel& sub, const SubModelSpec& spec, const ModelShape& global) {
  require(sub.shape() == sub_shape(spec, global), ErrorKind::shape_mismatch,
          "sub-model does not conform to its spec");
  EmbeddedModel out{LayeredModel(global), ParamMask(param_count(global), 0)};
  const auto map = global_index_map(spec, global);
  auto dst = out.model.params();
  const auto src = sub.params();
  for (std::size_t i = 0; i < map.size(); ++i) {
    dst[map[i]] = src[i];
    out.mask[map[i]] = 1;
  }
  return out;
}

// Moves a mask from sub-model coordinates to global coordinates.
inline ParamMask embed_mask(const ParamMask& sub_mask, const SubModelSpec& spec, const ModelShape& global) {
  const auto map = global_index_map(spec, global);
  require(sub_mask.size() == map.size(), ErrorKind::shape_mismatch, "mask does not match sub-model");
  ParamMask out(param_count(global), 0);
  for (std::size_t i = 0; i < map.size(); ++i) out[map[i]] = sub_mask[i];
  return out;
}

inline LayeredModel extract(const LayeredModel& global_model, const SubModelSpec& spec) {
  LayeredModel sub(sub_shape(spec, global_model.shape()));
  const auto map = global_index_map(spec, global_model.shape());
  auto dst = sub.params();
  const auto src = global_model.params();
  for (std::size_t i = 0; i < map.size(); ++i) dst[i] = src[map[i]];
  return sub;
}

// One bit per output unit of every layer.
struct UnitMask {
  std::vector<std::vector<std::uint8_t>> layers;

  static UnitMask filled(const ModelShape& shape, bool on) {
    UnitMask m;
    for (const auto& layer : shape) m.layers.emplace_back(layer.out_units, on ? 1 : 0);
    return m;
  }

  std::size_t selected(std::size_t l) const {
    return static_cast<std::size_t>(std::count(layers.at(l).begin(), layers.at(l).end(), std::uint8_t{1}));
  }

  friend bool operator==(const UnitMask&, const UnitMask&) = default;
};

inline ParamMask unit_mask_to_param_mask(const UnitMask& mask, const ModelShape& shape) {
  require(mask.layers.size() == shape.size(), ErrorKind::shape_mismatch, "unit mask layer count mismatch");
  const LayeredModel layout(shape);
  ParamMask out(layout.size(), 0);
  for (std::size_t l = 0; l < shape.size(); ++l) {
    require(mask.layers[l].size() == shape[l].out_units, ErrorKind::shape_mismatch,
            "unit mask width mismatch at layer " + std::to_string(l));
    for (std::size_t u = 0; u < shape[l].out_units; ++u)
      if (mask.layers[l][u]) layout.for_each_unit_param(l, u, [&](std::size_t i) { out[i] = 1; });
  }
  return out;
}

inline nlohmann::json shape_to_json(const ModelShape& shape) {
  auto layers = nlohmann::json::array();
  for (const auto& layer : shape)
    layers.push_back({{"in", layer.in_units}, {"out", layer.out_units}, {"bias", layer.has_bias}});
  return layers;
}

inline ModelShape shape_from_json(const nlohmann::json& j) {
  ModelShape shape;
  for (const auto& layer : j)
    shape.push_back({layer.at("in").get<std::size_t>(), layer.at("out").get<std::size_t>(),
                     layer.value("bias", true)});
  validate_shape(shape);
  return shape;
}

inline nlohmann::json unit_mask_to_json(const UnitMask& mask) {
  auto out = nlohmann::json::array();
  for (const auto& layer : mask.layers) {
    auto bits = nlohmann::json::array();
    for (auto b : layer) bits.push_back(b ? 1 : 0);
    out.push_back(std::move(bits));
  }
  return out;
}

inline UnitMask unit_mask_from_json(const nlohmann::json& j) {
  UnitMask mask;
  for (const auto& layer : j) {
    auto& bits = mask.layers.emplace_back();
    for (const auto& b : layer) bits.push_back(b.get<int>() != 0 ? 1 : 0);
  }
  return mask;
}

// Checkpoint file: one line of JSON header terminated by '\n' (layer dims in
// order plus caller-supplied extras), followed by the parameters as
// little-endian IEEE-754 doubles.
inline void write_checkpoint(const std::string& path, const LayeredModel& model,
                             const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header = {{"format", "feddd-checkpoint"},
                           {"version", 1},
                           {"layers", shape_to_json(model.shape())},
                           {"count", model.size()}};
  if (!extra.empty()) header["extra"] = extra;
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot open " + path + " for writing");
  out << header.dump() << '\n';
  for (double v : model.params()) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    out.write(bytes, 8);
  }
  require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path);
}

struct Checkpoint {
  LayeredModel model;
  nlohmann::json extra;
};

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::truncated_file, path + ": missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::bad_magic, path + ": header is not JSON: " + e.what());
  }
  require(header.value("format", "") == "feddd-checkpoint", ErrorKind::bad_magic, path + ": not a checkpoint");
  const ModelShape shape = shape_from_json(header.at("layers"));
  std::vector<double> params(param_count(shape));
  for (auto& v : params) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    require(in.gcount() == 8, ErrorKind::truncated_file, path + ": parameter block truncated");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    v = std::bit_cast<double>(bits);
  }
  return {LayeredModel(shape, std::move(params)), header.value("extra", nlohmann::json::object())};
}

}  // namespace feddd
