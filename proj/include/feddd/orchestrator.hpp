#pragma once

// End-to-end federated rounds with pluggable schemes: FedDD (differential
// parameter dropout), FedAvg, and the client-selection baselines FedCS and
// Oort.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "feddd/aggregation.hpp"
#include "feddd/allocation.hpp"
#include "feddd/data.hpp"
#include "feddd/error.hpp"
#include "feddd/metrics.hpp"
#include "feddd/model.hpp"
#include "feddd/selection.hpp"
#include "feddd/trainer.hpp"

namespace feddd {

enum class Scheme { fedavg, feddd, fedcs, oort };

inline Scheme scheme_from_string(std::string_view s) {
  if (s == "fedavg") return Scheme::fedavg;
  if (s == "feddd") return Scheme::feddd;
  if (s == "fedcs") return Scheme::fedcs;
  if (s == "oort") return Scheme::oort;
  fail(ErrorKind::config, "unknown scheme '" + std::string(s) + "'");
}

inline std::string_view to_string(Scheme s) {
  switch (s) {
    case Scheme::fedavg: return "fedavg";
    case Scheme::feddd: return "feddd";
    case Scheme::fedcs: return "fedcs";
    case Scheme::oort: return "oort";
  }
  return "feddd";
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | idx
  BlobSpec blobs;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  std::string train_images, train_labels, test_images, test_labels;
};

// Timing parameter ranges; each client draws uniformly once per run.
struct SystemConfig {
  bool shannon = false;
  Range uplink_bps{1e4, 5e4};
  Range downlink_bps{4e4, 20e4};
  Range cpu_hz{1e9, 10e9};
  Range cycles_per_sample{1e6, 10e6};
  // Shannon mode
  Range uplink_bandwidth_hz{1e4, 1e4};
  Range downlink_bandwidth_hz{2e4, 2e4};
  Range channel_gain{0.5, 3.0};
  double uplink_power_w = 0.1;
  double server_power_w = 1.0;
  double noise_w = 0.1;
  double bits_per_param = 32.0;
};

struct ExperimentConfig {
  Scheme scheme = Scheme::feddd;
  std::size_t clients = 20;
  std::size_t rounds = 100;
  std::size_t broadcast_period = 5;  // h
  double A_server = 0.6;
  double D_max = 0.8;
  double delta = 1.0;
  SelectionKind selection = SelectionKind::feddd;
  bool exempt_output_layer = false;
  bool equal_weights = false;
  double oort_alpha = 2.0;

  TrainConfig train{0.1, 1, 32, 0};
  std::vector<std::size_t> hidden{32, 16};
  // Hidden widths of each sub-model family; clients are assigned round-robin.
  // Empty means every client holds the full model.
  std::vector<std::vector<std::size_t>> submodels;

  DatasetConfig dataset;
  PartitionMode partition = PartitionMode::noniid_b;
  PartitionOptions partition_options;
  SystemConfig system;

  bool track_gradient = false;  // full-data gradient norm each round
  std::uint64_t seed = 1;
};

inline nlohmann::json range_json(const Range& r) { return nlohmann::json::array({r.lo, r.hi}); }

inline Range range_from(const nlohmann::json& j, const char* key, Range dflt) {
  if (!j.contains(key)) return dflt;
  const auto& v = j.at(key);
  if (v.is_number()) return {v.get<double>(), v.get<double>()};
  return {v.at(0).get<double>(), v.at(1).get<double>()};
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& s = c.system;
  return {
      {"scheme", to_string(c.scheme)},
      {"clients", c.clients},
      {"rounds", c.rounds},
      {"h", c.broadcast_period},
      {"A_server", c.A_server},
      {"D_max", c.D_max},
      {"delta", c.delta},
      {"selection", to_string(c.selection)},
      {"exempt_output_layer", c.exempt_output_layer},
      {"equal_weights", c.equal_weights},
      {"oort_alpha", c.oort_alpha},
      {"train", {{"learning_rate", c.train.learning_rate}, {"epochs", c.train.epochs}, {"batch_size", c.train.batch_size}}},
      {"hidden", c.hidden},
      {"submodels", c.submodels},
      {"dataset",
       {{"kind", c.dataset.kind},
        {"classes", c.dataset.blobs.classes},
        {"dims", c.dataset.blobs.dims},
        {"noise", c.dataset.blobs.noise},
        {"center_seed", c.dataset.blobs.center_seed},
        {"train_per_class", c.dataset.train_per_class},
        {"test_per_class", c.dataset.test_per_class},
        {"train_images", c.dataset.train_images},
        {"train_labels", c.dataset.train_labels},
        {"test_images", c.dataset.test_images},
        {"test_labels", c.dataset.test_labels}}},
      {"partition", to_string(c.partition)},
      {"partition_options",
       {{"classes_per_client", c.partition_options.classes_per_client},
        {"rare_classes", c.partition_options.rare_classes},
        {"rare_ratio", c.partition_options.rare_ratio},
        {"common_per_class", c.partition_options.common_per_class}}},
      {"system",
       {{"shannon", s.shannon},
        {"uplink_bps", range_json(s.uplink_bps)},
        {"downlink_bps", range_json(s.downlink_bps)},
        {"cpu_hz", range_json(s.cpu_hz)},
        {"cycles_per_sample", range_json(s.cycles_per_sample)},
        {"uplink_bandwidth_hz", range_json(s.uplink_bandwidth_hz)},
        {"downlink_bandwidth_hz", range_json(s.downlink_bandwidth_hz)},
        {"channel_gain", range_json(s.channel_gain)},
        {"uplink_power_w", s.uplink_power_w},
        {"server_power_w", s.server_power_w},
        {"noise_w", s.noise_w},
        {"bits_per_param", s.bits_per_param}}},
      {"track_gradient", c.track_gradient},
      {"seed", c.seed},
  };
}

// Missing keys keep their defaults.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("scheme")) c.scheme = scheme_from_string(j.at("scheme").get<std::string>());
    c.clients = j.value("clients", c.clients);
    c.rounds = j.value("rounds", c.rounds);
    c.broadcast_period = j.value("h", c.broadcast_period);
    c.A_server = j.value("A_server", c.A_server);
    c.D_max = j.value("D_max", c.D_max);
    c.delta = j.value("delta", c.delta);
    if (j.contains("selection")) c.selection = selection_kind_from_string(j.at("selection").get<std::string>());
    c.exempt_output_layer = j.value("exempt_output_layer", c.exempt_output_layer);
    c.equal_weights = j.value("equal_weights", c.equal_weights);
    c.oort_alpha = j.value("oort_alpha", c.oort_alpha);
    if (j.contains("train")) {
      const auto& t = j.at("train");
      c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
      c.train.epochs = t.value("epochs", c.train.epochs);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
    }
    c.hidden = j.value("hidden", c.hidden);
    c.submodels = j.value("submodels", c.submodels);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      c.dataset.kind = d.value("kind", c.dataset.kind);
      c.dataset.blobs.classes = d.value("classes", c.dataset.blobs.classes);
      c.dataset.blobs.dims = d.value("dims", c.dataset.blobs.dims);
      c.dataset.blobs.noise = d.value("noise", c.dataset.blobs.noise);
      c.dataset.blobs.center_seed = d.value("center_seed", c.dataset.blobs.center_seed);
      c.dataset.train_per_class = d.value("train_per_class", c.dataset.train_per_class);
      c.dataset.test_per_class = d.value("test_per_class", c.dataset.test_per_class);
      c.dataset.train_images = d.value("train_images", c.dataset.train_images);
      c.dataset.train_labels = d.value("train_labels", c.dataset.train_labels);
      c.dataset.test_images = d.value("test_images", c.dataset.test_images);
      c.dataset.test_labels = d.value("test_labels", c.dataset.test_labels);
    }
    if (j.contains("partition")) c.partition = partition_mode_from_string(j.at("partition").get<std::string>());
    if (j.contains("partition_options")) {
      const auto& p = j.at("partition_options");
      auto& o = c.partition_options;
      o.classes_per_client = p.value("classes_per_client", o.classes_per_client);
      o.rare_classes = p.value("rare_classes", o.rare_classes);
      o.rare_ratio = p.value("rare_ratio", o.rare_ratio);
      o.common_per_class = p.value("common_per_class", o.common_per_class);
    }
    if (j.contains("system")) {
      const auto& s = j.at("system");
      auto& o = c.system;
      o.shannon = s.value("shannon", o.shannon);
      o.uplink_bps = range_from(s, "uplink_bps", o.uplink_bps);
      o.downlink_bps = range_from(s, "downlink_bps", o.downlink_bps);
      o.cpu_hz = range_from(s, "cpu_hz", o.cpu_hz);
      o.cycles_per_sample = range_from(s, "cycles_per_sample", o.cycles_per_sample);
      o.uplink_bandwidth_hz = range_from(s, "uplink_bandwidth_hz", o.uplink_bandwidth_hz);
      o.downlink_bandwidth_hz = range_from(s, "downlink_bandwidth_hz", o.downlink_bandwidth_hz);
      o.channel_gain = range_from(s, "channel_gain", o.channel_gain);
      o.uplink_power_w = s.value("uplink_power_w", o.uplink_power_w);
      o.server_power_w = s.value("server_power_w", o.server_power_w);
      o.noise_w = s.value("noise_w", o.noise_w);
      o.bits_per_param = s.value("bits_per_param", o.bits_per_param);
    }
    c.track_gradient = j.value("track_gradient", c.track_gradient);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("bad experiment config: ") + e.what());
  }
  return c;
}

inline void validate(const ExperimentConfig& c) {
  require(c.clients >= 1, ErrorKind::config, "clients must be >= 1");
  require(c.rounds >= 1, ErrorKind::config, "rounds must be >= 1");
  require(c.broadcast_period >= 1, ErrorKind::config, "h must be >= 1");
  require(c.A_server > 0.0 && c.A_server <= 1.0, ErrorKind::config, "A_server must lie in (0, 1]");
  require(c.D_max >= 0.0 && c.D_max <= 1.0, ErrorKind::config, "D_max must lie in [0, 1]");
  require(c.delta >= 0.0, ErrorKind::config, "delta must be >= 0");
  require(c.oort_alpha >= 0.0, ErrorKind::config, "oort_alpha must be >= 0");
  require(c.system.bits_per_param > 0.0, ErrorKind::config, "bits_per_param must be positive");
  validate(c.train);
  if (c.scheme == Scheme::feddd)
    require(c.D_max >= 1.0 - c.A_server - 1e-12, ErrorKind::infeasible,
            "D_max < 1 - A_server: the FedDD upload budget is unreachable");
}

// SplitMix64 step, used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct SchemeDecision {
  std::vector<bool> participate;
  std::vector<double> D;
  SelectionKind selection = SelectionKind::feddd;
};

inline SchemeDecision scheme_fedavg(std::size_t clients) {
  return {std::vector<bool>(clients, true), std::vector<double>(clients, 0.0), SelectionKind::feddd};
}

namespace detail {

// Admits clients in `order` while the admitted model volume fits in
// A_server * sum U_n; stops at the first client that does not fit.
inline std::vector<bool> admit_under_budget(const std::vector<ClientProfile>& profiles,
                                            const std::vector<std::size_t>& order, double A_server) {
  double total = 0.0;
  for (const auto& p : profiles) total += p.model_bits;
  const double budget = A_server * total * (1.0 + 1e-12);
  std::vector<bool> admitted(profiles.size(), false);
  double used = 0.0;
  for (std::size_t n : order) {
    if (used + profiles[n].model_bits > budget) break;
    used += profiles[n].model_bits;
    admitted[n] = true;
  }
  require(std::find(admitted.begin(), admitted.end(), true) != admitted.end(), ErrorKind::empty_round,
          "no client fits the upload budget");
  return admitted;
}

}  // namespace detail

// Fastest clients (full-model round time) first.
inline SchemeDecision scheme_fedcs(const std::vector<ClientProfile>& profiles, double A_server) {
  std::vector<std::size_t> order(profiles.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return profiles[a].round_time(0.0) < profiles[b].round_time(0.0);
  });
  return {detail::admit_under_budget(profiles, order, A_server), std::vector<double>(profiles.size(), 0.0),
          SelectionKind::feddd};
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Statistical utility m_n * loss_n, multiplied by (T_pref / t_n)^alpha for
// clients slower than the median full-model round time T_pref.
inline std::vector<double> oort_utility(const std::vector<ClientProfile>& profiles, const std::vector<double>& losses,
                                        double alpha) {
  require(losses.size() == profiles.size(), ErrorKind::shape_mismatch, "one loss per client expected");
  std::vector<double> times;
  for (const auto& p : profiles) times.push_back(p.round_time(0.0));
  const double t_pref = median(times);
  std::vector<double> u(profiles.size());
  for (std::size_t n = 0; n < profiles.size(); ++n) {
    u[n] = profiles[n].samples * losses[n];
    if (times[n] > t_pref) u[n] *= std::pow(t_pref / times[n], alpha);
  }
  return u;
}

inline SchemeDecision scheme_oort(const std::vector<ClientProfile>& profiles, const std::vector<double>& losses,
                                  double alpha, double A_server) {
  require(alpha >= 0.0, ErrorKind::domain, "straggler penalty must be >= 0");
  const auto u = oort_utility(profiles, losses, alpha);
  std::vector<std::size_t> order(profiles.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return u[a] > u[b]; });
  return {detail::admit_under_budget(profiles, order, A_server), std::vector<double>(profiles.size(), 0.0),
          SelectionKind::feddd};
}

struct FedDDSettings {
  double delta = 1.0;
  double A_server = 0.6;
  double D_max = 0.8;
  double global_bits = 1.0;     // U
  double total_samples = 1.0;   // m
  SelectionKind selection = SelectionKind::feddd;
};

// Every client participates. Round 1 uses D = 0; later rounds solve the
// allocation program with the losses reported in the previous round.
inline SchemeDecision scheme_feddd(const std::vector<ClientProfile>& profiles, const std::vector<double>& losses,
                                   std::size_t round, const FedDDSettings& s, DropoutPlan* plan_out = nullptr) {
  SchemeDecision d{std::vector<bool>(profiles.size(), true), std::vector<double>(profiles.size(), 0.0), s.selection};
  if (round <= 1) return d;
  require(losses.size() == profiles.size(), ErrorKind::shape_mismatch, "one loss per client expected");
  std::vector<double> w;
  for (std::size_t n = 0; n < profiles.size(); ++n)
    w.push_back(regularizer(profiles[n], losses[n], s.global_bits, s.total_samples));
  auto plan = solve_allocation(build_instance(profiles, w, s.delta, s.A_server, s.D_max));
  d.D = plan.D;
  if (plan_out) *plan_out = std::move(plan);
  return d;
}

// Everything a run is built from, derived deterministically from the config.
struct Federation {
  ModelShape global_shape;
  LabeledDataset train, test;
  Partition partition;
  std::vector<LabeledDataset> client_data;
  std::vector<SubModelSpec> specs;
  std::vector<ClientProfile> profiles;
  CoverageTable coverage;
  bool heterogeneous = false;
  LayeredModel initial;
};

inline double draw(const Range& r, std::mt19937_64& rng) {
  if (r.hi <= r.lo) return r.lo;
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

inline Federation build_federation(const ExperimentConfig& cfg) {
  validate(cfg);
  Federation fed;
  if (cfg.dataset.kind == "synthetic") {
    fed.train = gen_synthetic(cfg.dataset.blobs, cfg.dataset.train_per_class, mix_seed(cfg.seed, 1));
    fed.test = gen_synthetic(cfg.dataset.blobs, cfg.dataset.test_per_class, mix_seed(cfg.seed, 2));
  } else if (cfg.dataset.kind == "idx") {
    fed.train = load_idx(cfg.dataset.train_images, cfg.dataset.train_labels);
    fed.test = load_idx(cfg.dataset.test_images, cfg.dataset.test_labels);
    fed.test.classes = fed.train.classes = std::max(fed.train.classes, fed.test.classes);
  } else {
    fail(ErrorKind::config, "unknown dataset kind '" + cfg.dataset.kind + "'");
  }

  std::vector<std::size_t> dims{fed.train.dims};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(fed.train.classes);
  fed.global_shape = mlp_shape(dims);

  fed.partition = partition(fed.train, cfg.clients, cfg.partition, mix_seed(cfg.seed, 3), cfg.partition_options);
  for (const auto& idx : fed.partition.indices) fed.client_data.push_back(subset(fed.train, idx));

  for (std::size_t n = 0; n < cfg.clients; ++n) {
    if (cfg.submodels.empty()) {
      fed.specs.push_back(SubModelSpec::full(fed.global_shape));
    } else {
      fed.specs.push_back(SubModelSpec::from_hidden(fed.global_shape, cfg.submodels[n % cfg.submodels.size()]));
      validate_spec(fed.specs.back(), fed.global_shape);
    }
    if (!fed.specs.back().is_full(fed.global_shape)) fed.heterogeneous = true;
  }
  fed.coverage = coverage_table(fed.specs, fed.global_shape);

  std::mt19937_64 rng(mix_seed(cfg.seed, 4));
  const auto& sys = cfg.system;
  for (std::size_t n = 0; n < cfg.clients; ++n) {
    ClientProfile p;
    p.cpu_hz = draw(sys.cpu_hz, rng);
    p.cycles_per_sample = draw(sys.cycles_per_sample, rng);
    if (sys.shannon) {
      p.uplink_bandwidth_hz = draw(sys.uplink_bandwidth_hz, rng);
      p.downlink_bandwidth_hz = draw(sys.downlink_bandwidth_hz, rng);
      p.channel_gain = draw(sys.channel_gain, rng);
      p.uplink_power_w = sys.uplink_power_w;
      p.server_power_w = sys.server_power_w;
      p.noise_w = sys.noise_w;
    } else {
      p.uplink_rate_bps = draw(sys.uplink_bps, rng);
      p.downlink_rate_bps = draw(sys.downlink_bps, rng);
    }
    p.samples = static_cast<double>(fed.client_data[n].size());
    p.samples_per_round = p.samples * static_cast<double>(cfg.train.epochs);
    p.model_bits = static_cast<double>(param_count(fed.specs[n], fed.global_shape)) * sys.bits_per_param;
    p.dist_score = distribution_score(fed.partition.dis[n], fed.train.classes);
    p.spec = fed.specs[n];
    validate(p);
    fed.profiles.push_back(std::move(p));
  }
  fed.initial = init_model(fed.global_shape, mix_seed(cfg.seed, 5));
  return fed;
}

struct RunResult {
  std::vector<RoundRecord> records;
  LayeredModel final_model;
  std::vector<UnitMask> last_masks;
  std::vector<double> sigma;  // at the final model
};

namespace detail {

[[noreturn]] inline void rethrow_with_context(const Error& e, std::size_t round, std::optional<std::size_t> client) {
  std::string ctx = "round " + std::to_string(round);
  if (client) ctx += " client " + std::to_string(*client);
  throw Error(e.kind(), ctx + ": " + e.what());
}

}  // namespace detail

class Orchestrator {
 public:
  explicit Orchestrator(ExperimentConfig cfg) : cfg_(std::move(cfg)), fed_(build_federation(cfg_)) {}

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const Federation& federation() const noexcept { return fed_; }

  RunResult run() {
    const std::size_t N = cfg_.clients;
    const auto& shape = fed_.global_shape;
    const double global_bits = static_cast<double>(param_count(shape)) * cfg_.system.bits_per_param;
    double total_samples = 0.0;
    for (const auto& p : fed_.profiles) total_samples += p.samples;
    const FedDDSettings dd{cfg_.delta, cfg_.A_server, cfg_.D_max, global_bits, total_samples, cfg_.selection};
    const BroadcastPolicy policy{cfg_.broadcast_period};
    const SelectionOptions sel_opt{cfg_.exempt_output_layer};

    std::vector<ParamMask> occupancy;
    std::vector<ModelShape> local_shapes;
    for (const auto& spec : fed_.specs) {
      local_shapes.push_back(sub_shape(spec, shape));
      occupancy.push_back(embed(extract(fed_.initial, spec), spec, shape).mask);
    }

    LayeredModel global = fed_.initial;
    std::vector<LayeredModel> local;
    for (const auto& spec : fed_.specs) local.push_back(extract(global, spec));

    const double initial_loss = std::log(static_cast<double>(shape.back().out_units));
    std::vector<double> reported_loss(N, initial_loss);  // FedDD: last round's losses
    std::vector<double> oort_loss(N, initial_loss);      // Oort: last loss seen from each client
    std::vector<double> download_params(N, 0.0);
    for (std::size_t n = 0; n < N; ++n) download_params[n] = static_cast<double>(popcount(occupancy[n]));

    RunResult result;
    std::vector<UnitMask> masks(N);
    double cum_time = 0.0;

    for (std::size_t t = 1; t <= cfg_.rounds; ++t) {
      SchemeDecision decision;
      try {
        switch (cfg_.scheme) {
          case Scheme::fedavg: decision = scheme_fedavg(N); break;
          case Scheme::feddd: decision = scheme_feddd(fed_.profiles, reported_loss, t, dd); break;
          case Scheme::fedcs: decision = scheme_fedcs(fed_.profiles, cfg_.A_server); break;
          case Scheme::oort: decision = scheme_oort(fed_.profiles, oort_loss, cfg_.oort_alpha, cfg_.A_server); break;
        }
      } catch (const Error& e) {
        detail::rethrow_with_context(e, t, std::nullopt);
      }

      // local training and selection
      std::vector<TrainResult> trained;
      std::vector<LayeredModel> embedded;
      std::vector<ParamMask> upload_masks;
      std::vector<std::size_t> uploaded;
      RoundRecord rec;
      rec.round = t;
      rec.D = decision.D;
      rec.participated = decision.participate;
      rec.realized_upload.assign(N, 0.0);
      double loss_sum = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        try {
          TrainConfig tc = cfg_.train;
          tc.seed = mix_seed(cfg_.seed, 100 + t, n);
          trained.push_back(local_train(local[n], fed_.client_data[n], tc));
          loss_sum += trained.back().loss;
          if (!decision.participate[n]) continue;
          if (cfg_.scheme == Scheme::feddd) {
            const SelectionStrategy strategy{decision.selection, mix_seed(cfg_.seed, 200 + t, n)};
            masks[n] = select_mask(strategy, local[n], trained[n].model, decision.D[n],
                                   fed_.heterogeneous ? &fed_.coverage : nullptr, sel_opt);
          } else {
            masks[n] = UnitMask::filled(local_shapes[n], true);
          }
          const auto sub_mask = unit_mask_to_param_mask(masks[n], local_shapes[n]);
          upload_masks.push_back(embed_mask(sub_mask, fed_.specs[n], shape));
          embedded.push_back(embed(trained[n].model, fed_.specs[n], shape).model);
          uploaded.push_back(n);
          rec.realized_upload[n] = static_cast<double>(popcount(sub_mask)) / static_cast<double>(sub_mask.size());
        } catch (const Error& e) {
          detail::rethrow_with_context(e, t, n);
        }
      }
      rec.mean_loss = loss_sum / static_cast<double>(N);

      // aggregation over participants in ascending client id
      std::vector<Upload> ups;
      std::vector<double> weights;
      for (std::size_t i = 0; i < uploaded.size(); ++i) {
        const double w = cfg_.equal_weights ? 1.0 : fed_.profiles[uploaded[i]].samples;
        ups.push_back({&embedded[i], &upload_masks[i], w});
        weights.push_back(fed_.profiles[uploaded[i]].samples);
      }
      try {
        global = aggregate(ups, global);
      } catch (const Error& e) {
        detail::rethrow_with_context(e, t, std::nullopt);
      }
      rec.eps = measure_epsilon(embedded, upload_masks).value_or(std::numeric_limits<double>::quiet_NaN());
      rec.eps_weighted =
          measure_epsilon(embedded, upload_masks, weights).value_or(std::numeric_limits<double>::quiet_NaN());

      // timing of the slowest participant
      double uploaded_params = 0.0;
      for (std::size_t i = 0; i < uploaded.size(); ++i) {
        const std::size_t n = uploaded[i];
        const auto& p = fed_.profiles[n];
        const double up = static_cast<double>(popcount(upload_masks[i]));
        uploaded_params += up;
        rec.t_server = std::max(rec.t_server, p.round_time(decision.D[n]));
        const double bits = cfg_.system.bits_per_param;
        rec.t_realized = std::max(rec.t_realized, download_params[n] * bits / p.downlink_rate() + p.compute_time() +
                                                      up * bits / p.uplink_rate());
      }
      rec.uploaded_bits = uploaded_params * cfg_.system.bits_per_param;
      cum_time += rec.t_server;
      rec.cum_time = cum_time;
      rec.mean_D = std::accumulate(decision.D.begin(), decision.D.end(), 0.0) / static_cast<double>(N);

      // losses reported to the server
      for (std::size_t n = 0; n < N; ++n) {
        reported_loss[n] = trained[n].loss;
        if (decision.participate[n]) oort_loss[n] = trained[n].loss;
      }

      // download and local model update
      for (std::size_t n = 0; n < N; ++n) {
        try {
          if (cfg_.scheme == Scheme::feddd) {
            const auto gmask = embed_mask(unit_mask_to_param_mask(masks[n], local_shapes[n]), fed_.specs[n], shape);
            const auto payload = broadcast(global, gmask, occupancy[n], t, policy);
            local[n] = local_update(trained[n].model, payload, gmask, fed_.specs[n]);
            download_params[n] = static_cast<double>(payload.param_count);
          } else {
            local[n] = extract(global, fed_.specs[n]);
            download_params[n] = static_cast<double>(popcount(occupancy[n]));
          }
        } catch (const Error& e) {
          detail::rethrow_with_context(e, t, n);
        }
      }

      const auto acc = evaluate(global, fed_.test);
      rec.test_acc = acc.overall;
      rec.per_class_acc = acc.per_class;
      if (cfg_.track_gradient) {
        std::vector<double> grad;
        std::vector<std::size_t> all(fed_.train.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        std::vector<std::size_t> used;
        for (const auto& idx : fed_.partition.indices) used.insert(used.end(), idx.begin(), idx.end());
        rec.global_loss = loss_and_gradient(global, fed_.train, used, grad);
        double sq = 0.0;
        for (double g : grad) sq += g * g;
        rec.grad_norm = std::sqrt(sq);
      } else {
        rec.global_loss = std::numeric_limits<double>::quiet_NaN();
        rec.grad_norm = std::numeric_limits<double>::quiet_NaN();
      }
      result.records.push_back(std::move(rec));
    }
    result.final_model = global;
    result.last_masks = masks;
    if (cfg_.track_gradient) result.sigma = estimate_sigma(fed_.client_data, global);
    return result;
  }

 private:
  ExperimentConfig cfg_;
  Federation fed_;
};

inline RunResult run(const ExperimentConfig& cfg) { return Orchestrator(cfg).run(); }

}  // namespace feddd
