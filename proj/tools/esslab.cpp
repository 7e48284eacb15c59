// Copyright 2026 The esslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// esslab command-line front end.
//
// Exit codes: 0 success, 1 usage or config error, 2 divergence,
// 3 gradient check failure.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "esslab/esslab.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitDiverged = 2;
constexpr int kExitGradcheck = 3;

int cmd_run(const std::string& config_path, const std::string& out_path, const std::string& policy_path,
            bool quiet) {
  const esslab::ExperimentConfig cfg = esslab::parse_config_file(config_path);
  if (cfg.suite) throw esslab::Error("suite.*: use the 'suite' subcommand for suite configs");
  esslab::RegimeConfig regime = cfg.regime;
  regime.alternate = esslab::resolve_alternate(cfg.alternate, cfg.train);

  const auto progress = [&](const esslab::RunLogRow& row) {
    if (!quiet && (row.step + 1) % 50 == 0)
      std::cerr << "step " << row.step << " reward " << row.mean_reward << " ess " << row.ess << '\n';
  };
  const esslab::ExperimentResult res = esslab::run_experiment(cfg.train, regime, progress);

  if (out_path.empty()) {
    esslab::write_run_log_csv(std::cout, res.log);
  } else {
    std::ostringstream csv;
    esslab::write_run_log_csv(csv, res.log);
    esslab::write_file_atomic(out_path, csv.str());
  }
  if (res.log.diverged) {
    std::cerr << "run " << res.log.message << " after " << res.log.rows.size() << " rows\n";
    return kExitDiverged;
  }
  if (!policy_path.empty()) {
    std::ostringstream ss;
    esslab::save_policy(ss, res.params, static_cast<std::int64_t>(res.log.rows.size()));
    esslab::write_file_atomic(policy_path, ss.str());
  }
  return kExitOk;
}

int cmd_suite(const std::string& config_path, const std::string& out_dir, std::size_t jobs, bool quiet) {
  const esslab::ExperimentConfig cfg = esslab::parse_config_file(config_path);
  const esslab::ExperimentSuite suite = esslab::build_suite(cfg);
  const auto progress = [&](const esslab::Arm& arm, std::uint64_t seed, const esslab::RunLog& log) {
    if (quiet) return;
    std::cerr << arm.label << " seed " << seed << ": " << (log.diverged ? "diverged" : "ok") << ", "
              << log.rows.size() << " rows, final reward " << esslab::final_mean_reward(log) << '\n';
  };
  const esslab::SuiteResult res = esslab::run_suite(suite, out_dir, jobs, progress);
  if (res.any_diverged) {
    for (const auto& r : res.runs)
      if (r.log.diverged)
        std::cerr << "diverged: " << suite.arms[r.arm].label << " seed " << r.seed << " (" << r.log.message << ")\n";
    return kExitDiverged;
  }
  return kExitOk;
}

int cmd_gradcheck(const std::string& which, std::uint64_t seed, std::size_t trials, double tol, bool inject_fault) {
  std::vector<esslab::ObjectiveKind> kinds;
  if (which == "all") kinds.assign(std::begin(esslab::kAllObjectives), std::end(esslab::kAllObjectives));
  else kinds.push_back(esslab::parse_objective_kind(which));

  esslab::GradCheckOptions opt;
  opt.trials = trials;
  opt.tolerance = tol;
  opt.inject_fault = inject_fault;
  std::vector<std::string> failed;
  for (esslab::ObjectiveKind k : kinds) {
    const esslab::GradCheckReport r = esslab::check_objective_gradient(k, seed, opt);
    esslab::print_report(std::cout, r);
    if (!r.pass) failed.emplace_back(esslab::to_string(k));
  }
  if (failed.empty()) return kExitOk;
  std::cerr << "gradient check failed:";
  for (const auto& f : failed) std::cerr << ' ' << f;
  std::cerr << '\n';
  return kExitGradcheck;
}

int cmd_eval(const std::string& snapshot_path, const std::string& task_config, std::size_t prompts,
             std::uint64_t seed) {
  std::ifstream in(snapshot_path);
  if (!in) throw esslab::Error("cannot open snapshot '" + snapshot_path + "'");
  const esslab::PolicySnapshot snap = esslab::load_policy(in);
  const esslab::ExperimentConfig cfg = esslab::parse_config_file(task_config);
  esslab::Rng rng(seed, esslab::stream_id({esslab::kEvalStream}));
  const double rate = esslab::eval_success_rate(snap.params(), cfg.train.task, prompts, rng);
  std::printf("success_rate=%.6f prompts=%zu\n", rate, prompts);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"esslab: toy-scale lab for RL post-training objectives"};
  app.require_subcommand(1);

  std::string config_path, out_path, policy_path;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Train one configuration and emit its run log CSV");
  run->add_option("config", config_path, "Config file")->required();
  run->add_option("--out", out_path, "Write the CSV here instead of stdout");
  run->add_option("--save-policy", policy_path, "Save the final policy snapshot");
  run->add_flag("-q,--quiet", quiet, "No progress on stderr");

  std::string suite_config, suite_out;
  std::size_t jobs = 1;
  auto* suite = app.add_subcommand("suite", "Run an experiment suite into an output directory");
  suite->add_option("config", suite_config, "Suite config file")->required();
  suite->add_option("--out", suite_out, "Output directory")->required();
  suite->add_option("-j,--jobs", jobs, "Parallel runs")->check(CLI::PositiveNumber);
  suite->add_flag("-q,--quiet", quiet, "No progress on stderr");

  std::string which = "all";
  std::uint64_t gc_seed = 1;
  std::size_t trials = 20;
  double tol = 1e-5;
  bool inject = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of objective gradients");
  gradcheck->add_option("kind", which, "Objective kind or 'all'");
  gradcheck->add_option("--seed", gc_seed, "Instance seed");
  gradcheck->add_option("--trials", trials, "Random instances per objective")->check(CLI::PositiveNumber);
  gradcheck->add_option("--tol", tol, "Relative error tolerance")->check(CLI::PositiveNumber);
  gradcheck->add_flag("--inject-fault", inject, "Corrupt one gradient coordinate (oracle self-test)");

  std::string snapshot_path, task_config;
  std::size_t prompts = 200;
  std::uint64_t eval_seed = 1;
  auto* eval = app.add_subcommand("eval", "Greedy exact-match success rate of a saved policy");
  eval->add_option("snapshot", snapshot_path, "Policy snapshot")->required();
  eval->add_option("task-config", task_config, "Config file with task.* keys")->required();
  eval->add_option("--prompts", prompts, "Number of held-out prompts")->check(CLI::PositiveNumber);
  eval->add_option("--seed", eval_seed, "Prompt seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*run) return cmd_run(config_path, out_path, policy_path, quiet);
    if (*suite) return cmd_suite(suite_config, suite_out, jobs, quiet);
    if (*gradcheck) return cmd_gradcheck(which, gc_seed, trials, tol, inject);
    if (*eval) return cmd_eval(snapshot_path, task_config, prompts, eval_seed);
  } catch (const esslab::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
