#pragma once

// Labeled datasets, synthetic Gaussian blobs, IDX ingestion and
// heterogeneous client partitioning.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "feddd/error.hpp"

namespace feddd {

struct LabeledDataset {
  std::size_t dims = 0;
  std::size_t classes = 0;
  std::vector<double> features;  // row-major, size() x dims
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * dims, dims}; }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }
};

inline void validate_dataset(const LabeledDataset& ds) {
  require(ds.size() > 0, ErrorKind::insufficient_data, "dataset is empty");
  require(ds.features.size() == ds.size() * ds.dims, ErrorKind::shape_mismatch, "feature matrix size mismatch");
  for (int y : ds.labels)
    require(y >= 0 && static_cast<std::size_t>(y) < ds.classes, ErrorKind::range,
            "label " + std::to_string(y) + " outside [0, " + std::to_string(ds.classes) + ")");
  for (double v : ds.features) require(std::isfinite(v), ErrorKind::numeric_overflow, "non-finite feature");
}

inline LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  LabeledDataset out{ds.dims, ds.classes, {}, {}};
  out.features.reserve(indices.size() * ds.dims);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    const auto r = ds.row(i);
    out.features.insert(out.features.end(), r.begin(), r.end());
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

struct BlobSpec {
  std::size_t classes = 10;
  std::size_t dims = 20;
  double noise = 0.3;
  // Class centers depend only on this seed so train and test draws share them.
  std::uint64_t center_seed = 0x5eedc0de;
};

inline std::vector<double> blob_centers(const BlobSpec& spec) {
  std::mt19937_64 rng(spec.center_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> centers(spec.classes * spec.dims);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (std::size_t j = 0; j < spec.dims; ++j) {
        centers[c * spec.dims + j] = normal(rng);
        norm += centers[c * spec.dims + j] * centers[c * spec.dims + j];
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < spec.dims; ++j) centers[c * spec.dims + j] /= norm;
  }
  return centers;
}

// Class-major Gaussian blobs: class c samples are center_c + noise * N(0, I).
inline LabeledDataset gen_synthetic(const BlobSpec& spec, std::size_t per_class, std::uint64_t seed) {
  require(spec.classes >= 2, ErrorKind::config, "need at least two classes");
  require(spec.dims >= 1, ErrorKind::config, "need at least one feature");
  const auto centers = blob_centers(spec);
  LabeledDataset ds{spec.dims, spec.classes, {}, {}};
  ds.features.reserve(spec.classes * per_class * spec.dims);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t s = 0; s < per_class; ++s) {
      for (std::size_t j = 0; j < spec.dims; ++j) {
        const double z = normal(rng);
        ds.features.push_back(centers[c * spec.dims + j] + spec.noise * z);
      }
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  return ds;
}

inline LabeledDataset gen_synthetic(std::size_t classes, std::size_t dims, std::size_t per_class,
                                    std::uint64_t seed, double noise = BlobSpec{}.noise) {
  BlobSpec spec;
  spec.classes = classes;
  spec.dims = dims;
  spec.noise = noise;
  return gen_synthetic(spec, per_class, seed);
}

namespace detail {

inline std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t at, const std::string& path) {
  require(buf.size() >= at + 4, ErrorKind::truncated_file, path + ": truncated header");
  return (std::uint32_t{buf[at]} << 24) | (std::uint32_t{buf[at + 1]} << 16) |
         (std::uint32_t{buf[at + 2]} << 8) | std::uint32_t{buf[at + 3]};
}

}  // namespace detail

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// MNIST-style IDX pair. Pixels are scaled to [0, 1].
inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto images = detail::read_all(images_path);
  const auto labels = detail::read_all(labels_path);

  const auto img_magic = detail::read_be32(images, 0, images_path);
  require(img_magic == kIdxImagesMagic, ErrorKind::bad_magic, images_path + ": bad IDX image magic");
  const auto lbl_magic = detail::read_be32(labels, 0, labels_path);
  require(lbl_magic == kIdxLabelsMagic, ErrorKind::bad_magic, labels_path + ": bad IDX label magic");

  const std::size_t n_images = detail::read_be32(images, 4, images_path);
  const std::size_t rows = detail::read_be32(images, 8, images_path);
  const std::size_t cols = detail::read_be32(images, 12, images_path);
  const std::size_t n_labels = detail::read_be32(labels, 4, labels_path);

  const std::size_t dims = rows * cols;
  require(images.size() >= 16 + n_images * dims, ErrorKind::truncated_file, images_path + ": pixel data truncated");
  require(labels.size() >= 8 + n_labels, ErrorKind::truncated_file, labels_path + ": label data truncated");
  require(n_images == n_labels, ErrorKind::count_mismatch,
          "image count " + std::to_string(n_images) + " != label count " + std::to_string(n_labels));
  require(n_images > 0, ErrorKind::insufficient_data, images_path + ": no examples");

  LabeledDataset ds{dims, 0, {}, {}};
  ds.features.resize(n_images * dims);
  for (std::size_t i = 0; i < n_images * dims; ++i) ds.features[i] = images[16 + i] / 255.0;
  ds.labels.resize(n_images);
  int max_label = 0;
  for (std::size_t i = 0; i < n_images; ++i) {
    ds.labels[i] = labels[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.classes = std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1);
  return ds;
}

enum class PartitionMode { iid, noniid_a, noniid_b, imbalanced };

inline PartitionMode partition_mode_from_string(std::string_view s) {
  if (s == "iid") return PartitionMode::iid;
  if (s == "noniid_a") return PartitionMode::noniid_a;
  if (s == "noniid_b") return PartitionMode::noniid_b;
  if (s == "imbalanced") return PartitionMode::imbalanced;
  fail(ErrorKind::config, "unknown partition mode '" + std::string(s) + "'");
}

inline std::string_view to_string(PartitionMode m) {
  switch (m) {
    case PartitionMode::iid: return "iid";
    case PartitionMode::noniid_a: return "noniid_a";
    case PartitionMode::noniid_b: return "noniid_b";
    case PartitionMode::imbalanced: return "imbalanced";
  }
  return "iid";
}

struct PartitionOptions {
  std::size_t classes_per_client = 3;  // noniid_b / imbalanced
  std::size_t rare_classes = 3;        // imbalanced: labels [0, rare_classes) are rare
  double rare_ratio = 0.4;             // n2 / n1
  std::size_t common_per_class = 0;    // n1; 0 = largest value the dataset supports
};

struct Partition {
  std::size_t classes = 0;
  std::vector<std::vector<std::size_t>> indices;  // per client, into the parent dataset
  std::vector<std::vector<double>> dis;           // per client class proportions

  std::size_t clients() const noexcept { return indices.size(); }
  std::size_t total() const {
    std::size_t m = 0;
    for (const auto& idx : indices) m += idx.size();
    return m;
  }

  nlohmann::json manifest() const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t n = 0; n < indices.size(); ++n) j[std::to_string(n)] = indices[n];
    return j;
  }
};

inline std::vector<double> class_proportions(const LabeledDataset& ds, std::span<const std::size_t> idx) {
  std::vector<double> dis(ds.classes, 0.0);
  for (std::size_t i : idx) dis[static_cast<std::size_t>(ds.labels[i])] += 1.0;
  if (!idx.empty())
    for (auto& p : dis) p /= static_cast<double>(idx.size());
  return dis;
}

// Sum over classes of min(C * dis_c, 1); lies in (0, C].
inline double distribution_score(std::span<const double> dis, std::size_t classes) {
  double score = 0.0;
  for (double p : dis) score += std::min(static_cast<double>(classes) * p, 1.0);
  return score;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> by_class(const LabeledDataset& ds) {
  std::vector<std::vector<std::size_t>> out(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i) out[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  return out;
}

// Each class's (shuffled) samples are split evenly among the clients that
// claimed it; no sample of a claimed class is left out.
inline std::vector<std::vector<std::size_t>> split_claimed(std::vector<std::vector<std::size_t>> pools,
                                                           const std::vector<std::vector<std::size_t>>& claims,
                                                           std::size_t clients, std::mt19937_64& rng) {
  std::vector<std::vector<std::size_t>> claimants(pools.size());
  for (std::size_t n = 0; n < clients; ++n)
    for (std::size_t c : claims[n]) claimants[c].push_back(n);
  std::vector<std::vector<std::size_t>> out(clients);
  for (std::size_t c = 0; c < pools.size(); ++c) {
    if (claimants[c].empty()) continue;
    auto& pool = pools[c];
    require(pool.size() >= claimants[c].size(), ErrorKind::insufficient_data,
            "class " + std::to_string(c) + " has " + std::to_string(pool.size()) + " samples for " +
                std::to_string(claimants[c].size()) + " clients");
    std::shuffle(pool.begin(), pool.end(), rng);
    // shares differ by at most one; the first claimants take the remainder
    const std::size_t K = claimants[c].size();
    std::size_t begin = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t share = pool.size() / K + (k < pool.size() % K ? 1 : 0);
      auto& dst = out[claimants[c][k]];
      dst.insert(dst.end(), pool.begin() + static_cast<std::ptrdiff_t>(begin),
                 pool.begin() + static_cast<std::ptrdiff_t>(begin + share));
      begin += share;
    }
  }
  for (auto& idx : out) std::sort(idx.begin(), idx.end());
  return out;
}

inline std::vector<std::size_t> pick_classes(std::size_t classes, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> all(classes);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace detail

inline Partition partition(const LabeledDataset& ds, std::size_t clients, PartitionMode mode, std::uint64_t seed,
                           const PartitionOptions& opt = {}) {
  require(clients >= 1, ErrorKind::config, "need at least one client");
  validate_dataset(ds);
  std::mt19937_64 rng(seed);
  Partition part;
  part.classes = ds.classes;

  switch (mode) {
    case PartitionMode::iid: {
      require(ds.size() >= clients, ErrorKind::insufficient_data,
              std::to_string(ds.size()) + " samples for " + std::to_string(clients) + " clients");
      std::vector<std::size_t> all(ds.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      std::shuffle(all.begin(), all.end(), rng);
      const std::size_t share = ds.size() / clients;
      part.indices.resize(clients);
      for (std::size_t n = 0; n < clients; ++n) {
        part.indices[n].assign(all.begin() + static_cast<std::ptrdiff_t>(n * share),
                               all.begin() + static_cast<std::ptrdiff_t>((n + 1) * share));
        std::sort(part.indices[n].begin(), part.indices[n].end());
      }
      break;
    }
    case PartitionMode::noniid_a: {
      std::vector<std::vector<std::size_t>> claims(clients);
      const std::size_t lo = std::min<std::size_t>(2, ds.classes);
      std::uniform_int_distribution<std::size_t> count(lo, ds.classes);
      for (auto& c : claims) c = detail::pick_classes(ds.classes, count(rng), rng);
      part.indices = detail::split_claimed(detail::by_class(ds), claims, clients, rng);
      break;
    }
    case PartitionMode::noniid_b:
    case PartitionMode::imbalanced: {
      auto pools = detail::by_class(ds);
      if (mode == PartitionMode::imbalanced) {
        require(ds.classes > opt.rare_classes, ErrorKind::config, "imbalanced split needs common classes");
        // n1 is bounded by the smallest common pool and by rare pools / ratio
        std::size_t n1 = opt.common_per_class;
        if (n1 == 0) {
          n1 = pools[opt.rare_classes].size();
          for (std::size_t c = 0; c < ds.classes; ++c) {
            const auto cap = c < opt.rare_classes
                                 ? static_cast<std::size_t>(std::floor(pools[c].size() / opt.rare_ratio + 1e-9))
                                 : pools[c].size();
            n1 = std::min(n1, cap);
          }
        }
        const auto n2 = static_cast<std::size_t>(std::llround(opt.rare_ratio * static_cast<double>(n1)));
        for (std::size_t c = 0; c < ds.classes; ++c) {
          const std::size_t want = c < opt.rare_classes ? n2 : n1;
          require(pools[c].size() >= want, ErrorKind::insufficient_data,
                  "class " + std::to_string(c) + " has fewer than " + std::to_string(want) + " samples");
          std::shuffle(pools[c].begin(), pools[c].end(), rng);
          pools[c].resize(want);
          std::sort(pools[c].begin(), pools[c].end());
        }
      }
      const std::size_t k = std::min(opt.classes_per_client, ds.classes);
      std::vector<std::vector<std::size_t>> claims(clients);
      for (auto& c : claims) c = detail::pick_classes(ds.classes, k, rng);
      part.indices = detail::split_claimed(std::move(pools), claims, clients, rng);
      break;
    }
  }
  for (std::size_t n = 0; n < clients; ++n)
    require(!part.indices[n].empty(), ErrorKind::insufficient_data,
            "client " + std::to_string(n) + " received no samples");
  for (const auto& idx : part.indices) part.dis.push_back(class_proportions(ds, idx));
  return part;
}

}  // namespace feddd
