#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "feddd/metrics.hpp"

using namespace feddd;

namespace {

std::vector<RoundRecord> timeline(std::vector<double> acc, double step) {
  std::vector<RoundRecord> out;
  for (std::size_t i = 0; i < acc.size(); ++i) {
    RoundRecord r;
    r.round = i + 1;
    r.test_acc = acc[i];
    r.t_server = step;
    r.cum_time = step * static_cast<double>(i + 1);
    out.push_back(r);
  }
  return out;
}

LayeredModel random_model(const ModelShape& shape, std::uint64_t seed) {
  LayeredModel m(shape);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  for (double& v : m.params()) v = g(rng);
  return m;
}

BoundParams sample_bound() {
  BoundParams p;
  p.L = 2.0;
  p.eps = 0.3;
  p.eta = 0.5 * max_step_size(p.L, p.eps);
  p.h = 5;
  p.K = 40;
  p.sigma = {0.5, 1.0, 1.5};
  p.gap = 2.0;
  return p;
}

}  // namespace

TEST(Evaluate, ConstantPredictor) {
  // logits favor class 0 for every input
  LayeredModel m(mlp_shape({2, 10}));
  m.bias(0)[0] = 5.0;
  const auto test = gen_synthetic(10, 2, 4, 1);
  const auto acc = evaluate(m, test);
  EXPECT_DOUBLE_EQ(acc.overall, 0.1);
  EXPECT_EQ(acc.per_class[0], 1.0);
  for (std::size_t c = 1; c < 10; ++c) EXPECT_EQ(acc.per_class[c], 0.0);
}

TEST(Evaluate, PerfectModel) {
  // identity on one-hot inputs
  LabeledDataset ds{3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 1, 2}};
  LayeredModel m(mlp_shape({3, 3}), {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0});
  EXPECT_EQ(evaluate(m, ds).overall, 1.0);
}

TEST(Evaluate, AbsentClassUndefined) {
  LabeledDataset ds{1, 3, {0.0, 1.0}, {0, 2}};
  const auto acc = evaluate(LayeredModel(mlp_shape({1, 3})), ds);
  EXPECT_TRUE(acc.per_class[0].has_value());
  EXPECT_FALSE(acc.per_class[1].has_value());
}

TEST(T2A, SelfIsOne) {
  const auto r = timeline({0.2, 0.5, 0.8}, 2.0);
  EXPECT_EQ(t2a(r, r, 0.5), 1.0);
}

TEST(T2A, HalfTime) {
  const auto base = timeline({0.2, 0.5, 0.8}, 2.0);
  const auto fast = timeline({0.2, 0.5, 0.8}, 1.0);
  EXPECT_EQ(t2a(fast, base, 0.8), 0.5);
}

TEST(T2A, NotReached) {
  const auto base = timeline({0.2, 0.5, 0.8}, 2.0);
  const auto slow = timeline({0.1, 0.2, 0.3}, 1.0);
  EXPECT_FALSE(t2a(slow, base, 0.8).has_value());
}

TEST(T2A, BaselineMissesTarget) {
  const auto base = timeline({0.2, 0.5}, 2.0);
  try {
    t2a(base, base, 0.9);
    FAIL() << "expected undefined";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::undefined);
  }
}

TEST(Epsilon, AllOnesIsZero) {
  const auto shape = mlp_shape({3, 4, 2});
  std::vector<LayeredModel> models{random_model(shape, 1), random_model(shape, 2), random_model(shape, 3)};
  const std::vector<ParamMask> masks(3, ParamMask(models[0].size(), 1));
  EXPECT_EQ(measure_epsilon(models, masks), 0.0);
}

// One client, W = (1, -2, 3, 0.5), coordinates 1 and 2 masked out:
// e_out / e_total = (4 + 9) / (1 + 4 + 9 + 0.25).
TEST(Epsilon, FourParameterCase) {
  const std::vector<LayeredModel> models{LayeredModel({LayerShape{2, 2, false}}, {1.0, -2.0, 3.0, 0.5})};
  const std::vector<ParamMask> masks{ParamMask{1, 0, 0, 1}};
  EXPECT_NEAR(*measure_epsilon(models, masks), 13.0 / 14.25, 1e-12);
}

TEST(Epsilon, ZeroMasksUndefined) {
  const std::vector<LayeredModel> models{random_model(mlp_shape({2, 2}), 1)};
  const std::vector<ParamMask> masks{ParamMask(models[0].size(), 0)};
  EXPECT_FALSE(measure_epsilon(models, masks).has_value());
}

TEST(Epsilon, ZeroMeanUndefined) {
  const std::vector<LayeredModel> models{LayeredModel(mlp_shape({2, 2}))};
  const std::vector<ParamMask> masks{ParamMask(models[0].size(), 1)};
  EXPECT_FALSE(measure_epsilon(models, masks).has_value());
}

TEST(Epsilon, WeightedVariantDiffers) {
  const ModelShape s{LayerShape{1, 2, false}};
  const std::vector<LayeredModel> models{LayeredModel(s, {1.0, 1.0}), LayeredModel(s, {3.0, 5.0})};
  const std::vector<ParamMask> masks{ParamMask{1, 1}, ParamMask{1, 0}};
  const std::vector<double> w{1.0, 3.0};
  // unweighted: agg (2, 1), mean (2, 3) -> 4/13
  EXPECT_NEAR(*measure_epsilon(models, masks), 4.0 / 13.0, 1e-15);
  // weighted: agg (2.5, 1), mean (2.5, 4) -> 9/22.25
  EXPECT_NEAR(*measure_epsilon(models, masks, w), 9.0 / 22.25, 1e-15);
}

TEST(Bound, EpsZeroKeepsFirstTermOnly) {
  auto p = sample_bound();
  p.eps = 0.0;
  const auto t = convergence_bound_terms(p);
  EXPECT_EQ(t.periodic, 0.0);
  EXPECT_EQ(t.residual, 0.0);
  EXPECT_NEAR(t.total(), 2.0 * p.gap / (p.K * p.h * (2.0 * p.eta - p.L * p.eta * p.eta)), 1e-15);
}

TEST(Bound, VanishesWithK) {
  auto p = sample_bound();
  p.eps = 0.0;
  const double b0 = convergence_bound(p);
  p.K *= 1e6;
  EXPECT_LT(convergence_bound(p), 1e-5 * b0);
}

TEST(Bound, IncreasingInHAtFixedIterations) {
  auto p = sample_bound();
  const double T = p.K * p.h;
  double previous = 0.0;
  for (double h : {1.0, 2.0, 5.0, 10.0}) {
    p.h = h;
    p.K = T / h;
    const double b = convergence_bound(p);
    EXPECT_GT(b, previous);
    previous = b;
  }
}

TEST(Bound, IncreasingInEachSigma) {
  auto p = sample_bound();
  const double base = convergence_bound(p);
  for (std::size_t n = 0; n < p.sigma.size(); ++n) {
    auto q = p;
    q.sigma[n] *= 1.5;
    EXPECT_GT(convergence_bound(q), base);
  }
}

TEST(Bound, StepSizeConditionEnforced) {
  auto p = sample_bound();
  p.eta = max_step_size(p.L, p.eps);
  try {
    convergence_bound(p);
    FAIL() << "expected domain";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::domain);
  }
}

TEST(Bound, ParamsFromRun) {
  auto records = timeline({0.1, 0.2, 0.3, 0.4, 0.5}, 1.0);
  const double losses[] = {2.0, 1.5, 1.0, 1.2, 0.9};
  const double eps[] = {0.1, 0.4, std::nan(""), 0.2, 0.0};
  for (std::size_t i = 0; i < records.size(); ++i) {
    records[i].global_loss = losses[i];
    records[i].eps = eps[i];
  }
  const auto p = bound_params_from_run(records, {1.0}, 3.0, 0.01, 5.0);
  EXPECT_DOUBLE_EQ(p.gap, 1.1);
  EXPECT_DOUBLE_EQ(p.eps, 0.4);
  EXPECT_DOUBLE_EQ(p.K, 1.0);
}

TEST(Sigma, IdenticalClientsZero) {
  const auto ds = gen_synthetic(3, 4, 5, 1);
  const std::vector<LabeledDataset> clients{ds, ds, ds};
  for (double s : estimate_sigma(clients, random_model(mlp_shape({4, 5, 3}), 2))) EXPECT_NEAR(s, 0.0, 1e-15);
}

TEST(Sigma, DisjointClassesPositive) {
  const auto ds = gen_synthetic(2, 3, 5, 1);
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < ds.size(); ++i) (ds.labels[i] == 0 ? a : b).push_back(i);
  const std::vector<LabeledDataset> clients{subset(ds, a), subset(ds, b)};
  for (double s : estimate_sigma(clients, random_model(mlp_shape({3, 4, 2}), 2))) EXPECT_GT(s, 0.0);
}

TEST(Sigma, DuplicationInvariant) {
  const auto ds = gen_synthetic(2, 3, 5, 1);
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < ds.size(); ++i) (i % 3 == 0 ? a : b).push_back(i);
  const auto model = random_model(mlp_shape({3, 4, 2}), 2);
  const auto ca = subset(ds, a);
  auto twice = a;
  twice.insert(twice.end(), a.begin(), a.end());
  const std::vector<LabeledDataset> once{ca, subset(ds, b)};
  const auto s1 = estimate_sigma(once, model);
  // doubling client 0 and client 1 together keeps the weights proportional
  auto b2 = b;
  b2.insert(b2.end(), b.begin(), b.end());
  const std::vector<LabeledDataset> doubled{subset(ds, twice), subset(ds, b2)};
  const auto s2 = estimate_sigma(doubled, model);
  for (std::size_t n = 0; n < 2; ++n) EXPECT_NEAR(s1[n], s2[n], 1e-12);
}

TEST(Smoothness, QuadraticRecoversCurvature) {
  // f(w) = 1.5 w^2, gradient 3w
  std::vector<GradientSnapshot> snaps;
  for (double w : {0.0, 1.0, -2.0}) snaps.push_back({{w}, {3.0 * w}});
  EXPECT_DOUBLE_EQ(estimate_smoothness(snaps), 3.0);
}

TEST(Csv, HeaderAndRows) {
  const auto csv = rounds_csv(timeline({0.1, 0.2, 0.3}, 1.0));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "round,t_server_s,cum_time_s,test_acc,mean_loss,eps_t,uploaded_bits,mean_D");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(Csv, RoundTripFullPrecision) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1e6);
  std::vector<RoundRecord> records;
  for (std::size_t i = 0; i < 20; ++i) {
    RoundRecord r;
    r.round = i + 1;
    r.t_server = u(rng) / 3.0;
    r.cum_time = u(rng) / 7.0;
    r.test_acc = u(rng) / 1e6;
    r.mean_loss = u(rng) / 11.0;
    r.eps = i % 4 == 0 ? std::nan("") : u(rng) / 13.0;
    r.uploaded_bits = u(rng);
    r.mean_D = u(rng) / 1e6;
    records.push_back(r);
  }
  const auto back = parse_rounds_csv(rounds_csv(records));
  ASSERT_EQ(back.size(), records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    EXPECT_EQ(back[i].round, records[i].round);
    EXPECT_EQ(back[i].t_server, records[i].t_server);
    EXPECT_EQ(back[i].cum_time, records[i].cum_time);
    EXPECT_EQ(back[i].test_acc, records[i].test_acc);
    EXPECT_EQ(back[i].mean_loss, records[i].mean_loss);
    EXPECT_EQ(std::isnan(back[i].eps), std::isnan(records[i].eps));
    if (!std::isnan(records[i].eps)) {
      EXPECT_EQ(back[i].eps, records[i].eps);
    }
    EXPECT_EQ(back[i].uploaded_bits, records[i].uploaded_bits);
    EXPECT_EQ(back[i].mean_D, records[i].mean_D);
  }
}

TEST(Export, WritesFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "feddd_export_test";
  std::filesystem::remove_all(dir);
  export_records(timeline({0.1, 0.2, 0.3}, 1.0), dir, {{"seed", 5}});
  std::ifstream csv(dir / "rounds.csv");
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 4);
  std::ifstream js(dir / "summary.json");
  const auto summary = nlohmann::json::parse(js);
  EXPECT_EQ(summary.at("seed"), 5);
  EXPECT_DOUBLE_EQ(summary.at("final_accuracy").get<double>(), 0.3);
  EXPECT_EQ(summary.at("rounds").size(), 3u);
  std::filesystem::remove_all(dir);
}

TEST(Export, UnwritableDirectoryNamesPath) {
  try {
    export_records(timeline({0.1}, 1.0), "/proc/feddd_cannot_write_here");
    FAIL() << "expected io";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
    EXPECT_NE(std::string(e.what()).find("/proc/feddd_cannot_write_here"), std::string::npos);
  }
}
