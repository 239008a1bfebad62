// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "feddd/feddd.hpp"

using namespace feddd;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

AllocInstance random_instance(std::size_t N, std::mt19937_64& rng) {
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  AllocInstance inst;
  const bool table_v = u(0, 1) < 0.5;
  inst.A_server = table_v ? 0.6 : u(0.2, 1.0);
  inst.D_max = table_v ? 0.8 : u(std::max(1.0 - inst.A_server, 0.0), 1.0);
  inst.delta = u(0, 1) < 0.3 ? 0.0 : u(0.0, 20.0);
  for (std::size_t n = 0; n < N; ++n) {
    const double U = u(1e4, 1e5);
    const double comm = U * (1.0 / u(1e4, 5e4) + 1.0 / u(4e4, 2e5));
    inst.U.push_back(U);
    inst.k.push_back(comm);
    inst.a.push_back(comm + u(1e6, 1e7) * u(50, 500) / u(1e9, 1e10));
    inst.w.push_back(u(0.0, 0.2));
  }
  return inst;
}

Outcome allocator_exactness() {
  std::mt19937_64 rng(20240601);
  double worst_rel = 0.0, worst_violation = 0.0;
  bool above_grid = false;
  for (int i = 0; i < 100; ++i) {
    const auto inst = random_instance(2 + static_cast<std::size_t>(i % 3), rng);
    const auto plan = solve_allocation(inst);
    const auto report = allocation_oracle(inst, 1e-3);
    const double ref = report.best().objective;
    worst_rel = std::max(worst_rel, std::abs(plan.objective - ref) / std::abs(ref));
    if (plan.objective > report.grid.objective * (1.0 + 1e-12)) above_grid = true;

    const double total = std::accumulate(inst.U.begin(), inst.U.end(), 0.0);
    double dropped = 0.0;
    for (std::size_t n = 0; n < inst.size(); ++n) {
      worst_violation = std::max({worst_violation, -plan.D[n], plan.D[n] - inst.D_max,
                                  inst.a[n] - inst.k[n] * plan.D[n] - plan.t_server});
      dropped += inst.U[n] * plan.D[n];
    }
    worst_violation = std::max(worst_violation, std::abs(dropped / total - (1.0 - inst.A_server)));
  }
  return {worst_rel <= 1e-6 && worst_violation <= 1e-9 && !above_grid,
          "max rel gap " + fmt("%.3g", worst_rel) + ", max constraint violation " + fmt("%.3g", worst_violation) +
              (above_grid ? ", solver worse than grid" : "")};
}

Outcome symmetry() {
  AllocInstance inst;
  for (int n = 0; n < 6; ++n) {
    inst.a.push_back(3.5);
    inst.k.push_back(2.5);
    inst.U.push_back(43840.0);
    inst.w.push_back(0.1);
  }
  inst.delta = 0.0;
  inst.A_server = 0.6;
  inst.D_max = 0.8;
  const auto plan = solve_allocation(inst);
  double worst = 0.0;
  for (double d : plan.D) worst = std::max(worst, std::abs(d - 0.4));
  return {worst <= 1e-9, "max |D_n - 0.4| = " + fmt("%.3g", worst)};
}

LayeredModel random_model(const ModelShape& shape, std::mt19937_64& rng) {
  LayeredModel m(shape);
  std::normal_distribution<double> g(0.0, 1.0);
  for (double& v : m.params()) v = g(rng);
  return m;
}

Outcome fedavg_degeneration() {
  std::mt19937_64 rng(7);
  int mismatched = 0;
  for (int r = 0; r < 50; ++r) {
    const auto shape = mlp_shape({3 + static_cast<std::size_t>(r % 4), 5, 4});
    const std::size_t N = 2 + static_cast<std::size_t>(r % 6);
    std::vector<LayeredModel> models;
    std::vector<double> m;
    for (std::size_t n = 0; n < N; ++n) {
      models.push_back(random_model(shape, rng));
      m.push_back(static_cast<double>(std::uniform_int_distribution<int>(1, 500)(rng)));
    }
    const ParamMask ones(param_count(shape), 1);
    std::vector<Upload> ups;
    for (std::size_t n = 0; n < N; ++n) ups.push_back({&models[n], &ones, m[n]});
    const auto previous = random_model(shape, rng);
    const auto got = aggregate(ups, previous);

    // sum_n (m_n / m) W_n, accumulated in client order
    double total = 0.0;
    for (double w : m) total += w;
    for (std::size_t j = 0; j < previous.size(); ++j) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) acc += (m[n] / total) * models[n].params()[j];
      if (got.params()[j] != acc) ++mismatched;
    }
  }

  // whole runs: FedDD with A_server = 1 and h = 1 against FedAvg
  ExperimentConfig cfg;
  cfg.rounds = 15;
  cfg.broadcast_period = 1;
  cfg.A_server = 1.0;
  cfg.scheme = Scheme::feddd;
  const auto dd = rounds_csv(run(cfg).records);
  cfg.scheme = Scheme::fedavg;
  const auto avg = run(cfg).records;
  const auto dd_records = parse_rounds_csv(dd);
  bool same_run = dd_records.size() == avg.size();
  for (std::size_t i = 0; same_run && i < avg.size(); ++i)
    same_run = dd_records[i].test_acc == avg[i].test_acc && dd_records[i].mean_loss == avg[i].mean_loss;
  return {mismatched == 0 && same_run, std::to_string(mismatched) + " mismatched coordinates over 50 rounds; " +
                                           (same_run ? "FedDD(A=1,h=1) run equals FedAvg run"
                                                     : "FedDD(A=1,h=1) run differs from FedAvg run")};
}

Outcome mask_accounting() {
  std::mt19937_64 rng(11);
  int checked = 0;
  std::string problem;
  const std::vector<ModelShape> shapes{mlp_shape({20, 32, 16, 10}), mlp_shape({7, 13, 5}), mlp_shape({4, 9, 9, 3})};
  const SelectionKind kinds[] = {SelectionKind::feddd, SelectionKind::random, SelectionKind::max,
                                 SelectionKind::delta, SelectionKind::ordered};
  for (const auto& shape : shapes) {
    const auto before = random_model(shape, rng);
    auto after = before;
    std::normal_distribution<double> g(0.0, 0.1);
    for (double& v : after.params()) v += g(rng);
    std::size_t unit_slack = 0;
    for (const auto& l : shape) unit_slack += l.unit_size();
    for (int step = 0; step <= 8; ++step) {
      const double D = step / 10.0;
      for (auto kind : kinds) {
        const auto mask = select_mask({kind, 5}, before, after, D);
        for (std::size_t l = 0; l < shape.size(); ++l) {
          const auto on = static_cast<std::size_t>(std::count(mask.layers[l].begin(), mask.layers[l].end(), 1));
          const auto want = static_cast<std::size_t>(std::lround(shape[l].out_units * (1.0 - D)));
          ++checked;
          if (on != want && problem.empty())
            problem = "layer " + std::to_string(l) + " D=" + fmt("%.1f", D) + " popcount " + std::to_string(on);
        }
        const double total = static_cast<double>(popcount(unit_mask_to_param_mask(mask, shape)));
        const double target = static_cast<double>(param_count(shape)) * (1.0 - D);
        if (std::abs(total - target) > static_cast<double>(unit_slack) && problem.empty())
          problem = "total " + fmt("%.0f", total) + " vs " + fmt("%.1f", target);
      }
    }
  }
  return {problem.empty(), std::to_string(checked) + " (layer, D, strategy) triples" +
                               (problem.empty() ? "" : "; first failure: " + problem)};
}

Outcome gradient_correctness() {
  std::mt19937_64 rng(3);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t in = 2 + static_cast<std::size_t>(i % 5);
    const std::size_t classes = 2 + static_cast<std::size_t>(i % 3);
    const auto shape = i % 2 ? mlp_shape({in, 6, classes}) : mlp_shape({in, 5, 4, classes});
    const auto model = init_model(shape, 100 + static_cast<std::uint64_t>(i));
    const auto data = gen_synthetic(classes, in, 4, 200 + static_cast<std::uint64_t>(i), 0.5);
    std::vector<std::size_t> batch(data.size());
    std::iota(batch.begin(), batch.end(), std::size_t{0});
    worst = std::max(worst, grad_check(model, data, batch, 1e-6));
  }
  return {worst < 1e-4, "max relative error " + fmt("%.3g", worst)};
}

ExperimentConfig desk_config(Scheme scheme, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.scheme = scheme;
  cfg.seed = seed;
  cfg.clients = 20;
  cfg.rounds = 200;
  cfg.partition = PartitionMode::noniid_b;
  return cfg;
}

double best_accuracy(const std::vector<RoundRecord>& r) {
  double best = 0.0;
  for (const auto& x : r) best = std::max(best, x.test_acc);
  return best;
}

const std::uint64_t kSeeds[] = {1, 2, 3};

Outcome time_to_accuracy_trend() {
  bool ok = true;
  std::string detail;
  for (auto seed : kSeeds) {
    std::vector<std::vector<RoundRecord>> runs;
    for (auto s : {Scheme::fedavg, Scheme::feddd, Scheme::fedcs, Scheme::oort})
      runs.push_back(run(desk_config(s, seed)).records);
    double reachable = 1.0;
    for (const auto& r : runs) reachable = std::min(reachable, best_accuracy(r));
    const double target = 0.95 * reachable;
    const auto ratio = t2a(runs[1], runs[0], target);
    const bool pass = ratio && *ratio < 0.75;
    ok = ok && pass;
    detail += "seed " + std::to_string(seed) + ": target " + fmt("%.3f", target) + " ratio " +
              (ratio ? fmt("%.3f", *ratio) : std::string("not reached")) + "; ";
  }
  return {ok, detail};
}

Outcome budget_robustness() {
  bool ok = true;
  std::string detail;
  for (auto seed : kSeeds) {
    double final_acc[2][4];
    const double budgets[] = {0.8, 0.6, 0.4, 0.2};
    for (int s = 0; s < 2; ++s)
      for (int b = 0; b < 4; ++b) {
        auto cfg = desk_config(s == 0 ? Scheme::feddd : Scheme::fedcs, seed);
        cfg.A_server = budgets[b];
        final_acc[s][b] = run(cfg).records.back().test_acc;
      }
    const double drop_dd = final_acc[0][0] - final_acc[0][3];
    const double drop_cs = final_acc[1][0] - final_acc[1][3];
    ok = ok && drop_dd < drop_cs;
    detail += "seed " + std::to_string(seed) + ": FedDD";
    for (double a : final_acc[0]) detail += fmt(" %.3f", a);
    detail += " / FedCS";
    for (double a : final_acc[1]) detail += fmt(" %.3f", a);
    detail += " (drops " + fmt("%.3f", drop_dd) + " vs " + fmt("%.3f", drop_cs) + "); ";
  }
  return {ok, detail};
}

Outcome rare_class_generalization() {
  bool ok = true;
  std::string detail;
  for (auto seed : kSeeds) {
    double rare[2];
    for (int s = 0; s < 2; ++s) {
      auto cfg = desk_config(s == 0 ? Scheme::feddd : Scheme::fedcs, seed);
      cfg.partition = PartitionMode::imbalanced;
      cfg.A_server = 0.2;
      const auto records = run(cfg).records;
      const auto& pc = records.back().per_class_acc;
      double sum = 0.0;
      for (std::size_t c = 0; c < cfg.partition_options.rare_classes; ++c) sum += pc.at(c).value_or(0.0);
      rare[s] = sum / static_cast<double>(cfg.partition_options.rare_classes);
    }
    ok = ok && rare[0] > rare[1];
    detail += "seed " + std::to_string(seed) + ": " + fmt("%.3f", rare[0]) + " vs " + fmt("%.3f", rare[1]) + "; ";
  }
  return {ok, detail};
}

Outcome bound_properties() {
  std::mt19937_64 rng(99);
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  int monotone = 0, first_only = 0, vanishing = 0;
  for (int i = 0; i < 100; ++i) {
    BoundParams p;
    p.L = u(0.5, 10.0);
    p.eps = u(0.01, 1.0);
    p.eta = u(0.05, 0.95) * max_step_size(p.L, p.eps);
    for (int n = 0; n < 5; ++n) p.sigma.push_back(u(0.1, 3.0));
    p.gap = u(0.1, 10.0);
    const double T = 5.0 * std::floor(u(20, 200));  // total local iterations K*h held fixed

    p.h = 5;
    p.K = T / 5.0;
    const double b5 = convergence_bound(p);
    p.h = 1;
    p.K = T;
    const double b1 = convergence_bound(p);
    if (b5 > b1) ++monotone;

    auto q = p;
    q.h = 5;
    q.K = T / 5.0;
    q.eps = 0.0;
    const auto terms = convergence_bound_terms(q);
    const double expected = 2.0 * q.gap / (q.K * q.h * (2.0 * q.eta - q.L * q.eta * q.eta));
    if (terms.periodic == 0.0 && terms.residual == 0.0 &&
        std::abs(terms.total() - expected) <= 1e-12 * expected)
      ++first_only;

    p.h = 5;
    p.K = T / 5.0;
    const double initial = convergence_bound(p);
    p.K *= 1000.0;
    if (convergence_bound_terms(p).optimization < 1e-3 * initial) ++vanishing;
  }
  return {monotone == 100 && first_only == 100 && vanishing == 100,
          "h-monotone " + std::to_string(monotone) + "/100, eps=0 first-term-only " + std::to_string(first_only) +
              "/100, K x1000 first term below 1e-3 of initial " + std::to_string(vanishing) + "/100"};
}

Outcome epsilon_soundness() {
  std::mt19937_64 rng(5);
  int nonzero = 0;
  for (int i = 0; i < 50; ++i) {
    const auto shape = mlp_shape({4, 6, 3});
    std::vector<LayeredModel> models;
    std::vector<ParamMask> masks;
    for (int n = 0; n < 1 + i % 7; ++n) {
      models.push_back(random_model(shape, rng));
      masks.emplace_back(param_count(shape), 1);
    }
    if (measure_epsilon(models, masks).value_or(-1.0) != 0.0) ++nonzero;
  }
  // one client, W = (1, 2, 3, 4), last two coordinates masked out:
  // e_out / e_total = (9 + 16) / (1 + 4 + 9 + 16)
  LayeredModel w({LayerShape{2, 2, false}}, std::vector<double>{1.0, 2.0, 3.0, 4.0});
  const std::vector<LayeredModel> one{w};
  const std::vector<ParamMask> mask{ParamMask{1, 1, 0, 0}};
  const double eps = measure_epsilon(one, mask).value_or(-1.0);
  const double expected = 25.0 / 30.0;
  return {nonzero == 0 && std::abs(eps - expected) <= 1e-12,
          std::to_string(nonzero) + "/50 all-ones cases nonzero; hand case " + fmt("%.15f", eps) + " vs " +
              fmt("%.15f", expected)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism() {
  const auto base = std::filesystem::temp_directory_path() / "feddd_acceptance_determinism";
  std::filesystem::remove_all(base);
  bool same = true;
  std::string detail;
  for (auto scheme : {Scheme::feddd, Scheme::oort}) {
    auto cfg = desk_config(scheme, 42);
    cfg.rounds = 60;
    cfg.submodels = {{32, 16}, {16, 8}};
    export_records(run(cfg).records, base / "a");
    export_records(run(cfg).records, base / "b");
    const auto a = slurp(base / "a" / "rounds.csv");
    const auto b = slurp(base / "b" / "rounds.csv");
    same = same && !a.empty() && a == b;
    detail += std::string(to_string(scheme)) + " " + std::to_string(a.size()) + " bytes " +
              (a == b ? "identical" : "differ") + "; ";
  }
  std::filesystem::remove_all(base);
  return {same, detail};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> check;
  };
  const Criterion criteria[] = {
      {"1 allocator exactness", allocator_exactness},
      {"2 symmetric allocation", symmetry},
      {"3 fedavg degeneration", fedavg_degeneration},
      {"4 mask accounting", mask_accounting},
      {"5 gradient correctness", gradient_correctness},
      {"6 time-to-accuracy trend", time_to_accuracy_trend},
      {"7 budget robustness trend", budget_robustness},
      {"8 rare-class generalization", rare_class_generalization},
      {"9 convergence bound properties", bound_properties},
      {"10 epsilon monitor soundness", epsilon_soundness},
      {"11 determinism", determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    while (!o.detail.empty() && (o.detail.back() == ' ' || o.detail.back() == ';')) o.detail.pop_back();
    std::printf("%s criterion %s: %s\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(std::size(criteria)) - failed, std::size(criteria));
  return failed == 0 ? 0 : 1;
}
