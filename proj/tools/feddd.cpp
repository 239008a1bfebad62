// feddd command line: run experiments, solve or brute-force allocation instances.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "feddd/feddd.hpp"

namespace {

using nlohmann::json;

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) feddd::fail(feddd::ErrorKind::io, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    feddd::fail(feddd::ErrorKind::config, path + ": " + e.what());
  }
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

json t2a_table(const std::vector<feddd::RoundRecord>& records) {
  json table = json::object();
  for (double target : {0.5, 0.6, 0.7, 0.8, 0.9}) {
    char key[16];
    std::snprintf(key, sizeof key, "%.2f", target);
    const auto t = feddd::time_to_accuracy(records, target);
    table[key] = t ? json(*t) : json(nullptr);
  }
  return table;
}

int cmd_run(const std::string& config_path, const std::optional<std::string>& scheme,
            const std::optional<std::uint64_t>& seed, const std::optional<std::size_t>& rounds,
            const std::string& out_dir) {
  feddd::ExperimentConfig cfg = config_path.empty() ? feddd::ExperimentConfig{}
                                                    : feddd::config_from_json(read_json_file(config_path));
  if (scheme) cfg.scheme = feddd::scheme_from_string(*scheme);
  if (seed) cfg.seed = *seed;
  if (rounds) cfg.rounds = *rounds;

  const auto result = feddd::run(cfg);
  json extra{{"config", feddd::to_json(cfg)},
             {"seeds", {{"master", cfg.seed}}},
             {"time_to_accuracy", t2a_table(result.records)}};
  feddd::export_records(result.records, out_dir, extra);

  const auto& last = result.records.back();
  print_json({{"status", "ok"},
              {"scheme", feddd::to_string(cfg.scheme)},
              {"rounds", result.records.size()},
              {"final_accuracy", last.test_acc},
              {"total_time_s", last.cum_time},
              {"out", out_dir}});
  return 0;
}

int cmd_solve(const std::string& instance_path) {
  const auto inst = feddd::instance_from_json(read_json_file(instance_path));
  print_json(feddd::to_json(feddd::solve_allocation(inst)));
  return 0;
}

int cmd_oracle(const std::string& instance_path, double step) {
  const auto inst = feddd::instance_from_json(read_json_file(instance_path));
  const auto report = feddd::allocation_oracle(inst, step);
  const auto plan = feddd::solve_allocation(inst);
  auto sol = [](const feddd::OracleSolution& s) {
    return json{{"D", s.D}, {"objective", s.found() ? json(s.objective) : json(nullptr)}, {"evaluated", s.evaluated}};
  };
  const double best = report.best().objective;
  print_json({{"grid", sol(report.grid)},
              {"vertex", sol(report.vertex)},
              {"simplex", feddd::to_json(plan)},
              {"relative_gap", std::abs(plan.objective - best) / std::max(1.0, std::abs(best))}});
  return 0;
}

int report_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"status", "error"}, {"kind", kind}, {"message", message}}.dump() << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FedDD federated learning simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir, instance_path;
  std::optional<std::string> scheme;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> rounds;
  double grid_step = 1e-3;

  auto* run = app.add_subcommand("run", "simulate a federated training run");
  run->add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  run->add_option("--scheme", scheme, "fedavg | feddd | fedcs | oort");
  run->add_option("--seed", seed, "master seed");
  run->add_option("--rounds", rounds, "number of rounds");
  run->add_option("--out", out_dir, "output directory")->required();

  auto* solve = app.add_subcommand("solve", "solve one dropout-rate allocation instance");
  solve->add_option("--instance", instance_path, "instance (JSON)")->required()->check(CLI::ExistingFile);

  auto* oracle = app.add_subcommand("oracle", "brute-force an allocation instance and compare with the solver");
  oracle->add_option("--instance", instance_path, "instance (JSON)")->required()->check(CLI::ExistingFile);
  oracle->add_option("--grid-step", grid_step, "grid step")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what());
  }

  try {
    if (*run) return cmd_run(config_path, scheme, seed, rounds, out_dir);
    if (*solve) return cmd_solve(instance_path);
    return cmd_oracle(instance_path, grid_step);
  } catch (const feddd::Error& e) {
    return report_error(std::string(feddd::to_string(e.kind())), e.what());
  } catch (const std::exception& e) {
    return report_error("internal", e.what());
  }
}
