#pragma once

// MLP forward/backward (ReLU hidden layers, softmax output, mean
// cross-entropy), mini-batch SGD and a finite-difference gradient check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "feddd/data.hpp"
#include "feddd/error.hpp"
#include "feddd/model.hpp"

namespace feddd {

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& cfg) {
  require(cfg.learning_rate >= 0.0 && std::isfinite(cfg.learning_rate), ErrorKind::config,
          "learning rate must be finite and non-negative");
  require(cfg.epochs >= 1, ErrorKind::config, "epochs must be >= 1");
  require(cfg.batch_size >= 1, ErrorKind::config, "batch size must be >= 1");
}

struct TrainResult {
  LayeredModel model;         // after local update
  double loss = 0.0;          // mean per-sample loss over the final epoch
  std::vector<double> delta;  // model - start, flat
};

// Uniform in +-1/sqrt(in_units) per layer, biases included.
inline LayeredModel init_model(const ModelShape& shape, std::uint64_t seed) {
  LayeredModel model(shape);
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < shape.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(shape[l].in_units));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& w : model.weights(l)) w = u(rng);
    for (auto& b : model.bias(l)) b = u(rng);
  }
  return model;
}

namespace detail {

// Scratch buffers for one sample's forward/backward pass.
struct Workspace {
  std::vector<std::vector<double>> act;  // act[0] = input, act[l+1] = output of layer l
  std::vector<double> delta, next_delta;

  explicit Workspace(const ModelShape& shape) {
    act.resize(shape.size() + 1);
    act[0].resize(shape[0].in_units);
    for (std::size_t l = 0; l < shape.size(); ++l) act[l + 1].resize(shape[l].out_units);
  }
};

inline void forward_sample(const LayeredModel& model, std::span<const double> x, Workspace& ws) {
  const auto& shape = model.shape();
  std::copy(x.begin(), x.end(), ws.act[0].begin());
  for (std::size_t l = 0; l < shape.size(); ++l) {
    const auto w = model.weights(l);
    const auto b = model.bias(l);
    const auto& in = ws.act[l];
    auto& out = ws.act[l + 1];
    const std::size_t n_in = shape[l].in_units;
    const bool last = l + 1 == shape.size();
    for (std::size_t o = 0; o < shape[l].out_units; ++o) {
      const double* row = w.data() + o * n_in;
      double z = b.empty() ? 0.0 : b[o];
      for (std::size_t i = 0; i < n_in; ++i) z += row[i] * in[i];
      out[o] = (last || z > 0.0) ? z : 0.0;
    }
  }
}

// Cross-entropy of the final activations (logits) against `label`;
// overwrites the logits with softmax probabilities.
inline double softmax_xent(std::vector<double>& logits, int label) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double log_z = mx + std::log(sum);
  const double loss = log_z - logits[static_cast<std::size_t>(label)];
  for (auto& v : logits) v = std::exp(v - log_z);
  return loss;
}

// Accumulates d(loss)/d(params) for one sample into grad (unscaled).
inline void backward_sample(const LayeredModel& model, int label, Workspace& ws, std::span<double> grad) {
  const auto& shape = model.shape();
  const std::size_t L = shape.size();
  ws.delta.assign(ws.act[L].begin(), ws.act[L].end());
  ws.delta[static_cast<std::size_t>(label)] -= 1.0;
  for (std::size_t l = L; l-- > 0;) {
    const std::size_t n_in = shape[l].in_units;
    const std::size_t n_out = shape[l].out_units;
    const auto& in = ws.act[l];
    double* gw = grad.data() + model.layer_offset(l);
    double* gb = grad.data() + model.bias_offset(l);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double d = ws.delta[o];
      if (d == 0.0) continue;
      double* grow = gw + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) grow[i] += d * in[i];
      if (shape[l].has_bias) gb[o] += d;
    }
    if (l == 0) break;
    const auto w = model.weights(l);
    ws.next_delta.assign(n_in, 0.0);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double d = ws.delta[o];
      if (d == 0.0) continue;
      const double* row = w.data() + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) ws.next_delta[i] += d * row[i];
    }
    // ReLU derivative of the layer below
    for (std::size_t i = 0; i < n_in; ++i)
      if (in[i] <= 0.0) ws.next_delta[i] = 0.0;
    std::swap(ws.delta, ws.next_delta);
  }
}

inline void check_input(const LayeredModel& model, const LabeledDataset& data) {
  require(data.dims == model.shape().front().in_units, ErrorKind::shape_mismatch,
          "feature dims " + std::to_string(data.dims) + " != model input " +
              std::to_string(model.shape().front().in_units));
  require(data.classes <= model.shape().back().out_units, ErrorKind::shape_mismatch,
          "dataset has more classes than model outputs");
}

}  // namespace detail

struct ForwardResult {
  std::vector<double> logits;  // batch x classes, row-major
  double loss = 0.0;           // mean cross-entropy
};

inline ForwardResult forward(const LayeredModel& model, const LabeledDataset& data,
                             std::span<const std::size_t> batch) {
  detail::check_input(model, data);
  detail::Workspace ws(model.shape());
  const std::size_t C = model.shape().back().out_units;
  ForwardResult out;
  out.logits.reserve(batch.size() * C);
  double total = 0.0;
  for (std::size_t i : batch) {
    detail::forward_sample(model, data.row(i), ws);
    auto& logits = ws.act.back();
    for (double v : logits)
      require(std::isfinite(v), ErrorKind::numeric_overflow, "non-finite activation in forward pass");
    out.logits.insert(out.logits.end(), logits.begin(), logits.end());
    total += detail::softmax_xent(logits, data.labels[i]);
  }
  out.loss = batch.empty() ? 0.0 : total / static_cast<double>(batch.size());
  return out;
}

inline ForwardResult forward(const LayeredModel& model, const LabeledDataset& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return forward(model, data, all);
}

// Mean loss and its gradient over `batch`.
inline double loss_and_gradient(const LayeredModel& model, const LabeledDataset& data,
                                std::span<const std::size_t> batch, std::vector<double>& grad) {
  detail::check_input(model, data);
  grad.assign(model.size(), 0.0);
  detail::Workspace ws(model.shape());
  double total = 0.0;
  for (std::size_t i : batch) {
    detail::forward_sample(model, data.row(i), ws);
    total += detail::softmax_xent(ws.act.back(), data.labels[i]);
    detail::backward_sample(model, data.labels[i], ws, grad);
  }
  if (batch.empty()) return 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (auto& g : grad) g *= scale;
  return total * scale;
}

inline std::vector<double> full_gradient(const LayeredModel& model, const LabeledDataset& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<double> grad;
  loss_and_gradient(model, data, all, grad);
  return grad;
}

// E epochs of mini-batch SGD with a per-epoch shuffle drawn from cfg.seed.
inline TrainResult local_train(const LayeredModel& start, const LabeledDataset& data, const TrainConfig& cfg) {
  validate(cfg);
  require(data.size() > 0, ErrorKind::insufficient_data, "local dataset is empty");
  detail::check_input(start, data);

  TrainResult result{start, 0.0, {}};
  auto& model = result.model;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> grad;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + begin, end - begin);
      const double loss = loss_and_gradient(model, data, batch, grad);
      if (!std::isfinite(loss))
        fail(ErrorKind::divergence, "non-finite loss at SGD step " + std::to_string(step));
      epoch_loss += loss * static_cast<double>(batch.size());
      auto params = model.params();
      for (std::size_t j = 0; j < params.size(); ++j) params[j] -= cfg.learning_rate * grad[j];
    }
    result.loss = epoch_loss / static_cast<double>(order.size());
  }
  if (!model.all_finite()) fail(ErrorKind::divergence, "non-finite parameters after SGD step " + std::to_string(step));

  result.delta.resize(model.size());
  const auto a = model.params();
  const auto b = start.params();
  for (std::size_t j = 0; j < a.size(); ++j) result.delta[j] = a[j] - b[j];
  return result;
}

// Max relative error between the analytic gradient and central finite
// differences over up to `max_coords` sampled coordinates (0 = all). The
// denominator is max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const LayeredModel& model, const LabeledDataset& data, std::span<const std::size_t> batch,
                         double eps, std::size_t max_coords = 0, std::uint64_t seed = 0) {
  require(eps > 0.0, ErrorKind::domain, "finite-difference step must be positive");
  std::vector<double> analytic;
  loss_and_gradient(model, data, batch, analytic);

  std::vector<std::size_t> coords(model.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (max_coords != 0 && max_coords < coords.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }

  LayeredModel probe = model;
  double worst = 0.0;
  for (std::size_t j : coords) {
    const double orig = probe.params()[j];
    probe.params()[j] = orig + eps;
    const double up = forward(probe, data, batch).loss;
    probe.params()[j] = orig - eps;
    const double down = forward(probe, data, batch).loss;
    probe.params()[j] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[j] - numeric) / denom);
  }
  return worst;
}

}  // namespace feddd
