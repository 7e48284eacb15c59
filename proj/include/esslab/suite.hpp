// Copyright 2026 The esslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment suites: a set of labelled arms run over a shared seed list.
//
// Output directory layout:
//   <label>_seed<s>.csv   run log of one (arm, seed)
//   arms.csv              arm,seed,status,rows,final_mean_reward,median_ess
//   summary.csv           per-step mean reward over seeds
//                         (clip_sweep: step,p3o,grpo_mean,grpo_std)
//   bands.csv             clip_sweep only: step,grpo_cross_clip_std,p3o_cross_seed_std
// Per-arm files are written atomically as each run finishes; summary.csv is
// written last.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "esslab/config.hpp"
#include "esslab/error.hpp"
#include "esslab/trainer.hpp"

namespace esslab {

struct Arm {
  std::string label;
  TrainConfig train;
  RegimeConfig regime;
  AlternateSource alternate;
};

struct ExperimentSuite {
  SuiteKind kind = SuiteKind::clip_sweep;
  std::vector<Arm> arms;
  std::vector<std::uint64_t> seeds;
};

/// Rows of the final-window statistics in arms.csv.
inline constexpr std::size_t kFinalWindow = 100;

namespace detail {

inline std::string num_label(double x) {
  std::ostringstream ss;
  ss << x;
  return ss.str();
}

inline std::vector<ObjectiveKind> suite_objectives(const SuiteOptions& s) {
  if (!s.objectives.empty()) return s.objectives;
  if (s.kind == SuiteKind::two_anchor_compare) return {ObjectiveKind::p3o, ObjectiveKind::two_anchor};
  return {ObjectiveKind::p3o, ObjectiveKind::grpo};
}

}  // namespace detail

inline ExperimentSuite build_suite(const ExperimentConfig& config) {
  if (!config.suite) throw Error("suite.kind: not a suite config");
  if (config.keys.contains("train.objective")) throw Error("train.objective: suites choose objectives via suite.objectives");
  const SuiteOptions& s = *config.suite;
  if (s.seeds.empty()) throw Error("suite.seeds: at least one seed required");

  ExperimentSuite suite;
  suite.kind = s.kind;
  suite.seeds = s.seeds;
  auto add = [&](std::string label, ObjectiveKind kind, const RegimeConfig& regime) {
    Arm arm{std::move(label), config.train, regime, config.alternate};
    arm.train.objective.kind = kind;
    suite.arms.push_back(std::move(arm));
  };

  if (s.kind == SuiteKind::clip_sweep) {
    if (s.clips.empty()) throw Error("suite.clips: at least one clip range required");
    for (double eps : s.clips) {
      add("grpo_eps" + detail::num_label(eps), ObjectiveKind::grpo, config.regime);
      auto& clip = suite.arms.back().train.objective.clip;
      clip.eps_low = clip.eps_high = clip.eps_seq = eps;
      clip.validate();
    }
    add("p3o", ObjectiveKind::p3o, config.regime);
  } else {
    const auto objectives = detail::suite_objectives(s);
    for (ObjectiveKind k : objectives)
      if (uses_clip_range(k) && !config.has_clip_range) throw Error("missing clip range for fixed-clip objective");
    for (ObjectiveKind k : objectives) {
      const std::string name(to_string(k));
      RegimeConfig r = config.regime;
      switch (s.kind) {
        case SuiteKind::temperature:
          for (double t : s.temperatures) {
            r.rollout_temperature = t;
            add(name + "_T" + detail::num_label(t), k, r);
          }
          break;
        case SuiteKind::quantization:
          for (double q : s.quantize_steps) {
            r.quantize_step = q;
            add(name + "_q" + detail::num_label(q), k, r);
          }
          break;
        case SuiteKind::staleness:
          for (std::size_t lag : s.staleness) {
            r.staleness = lag;
            add(name + "_k" + std::to_string(lag), k, r);
          }
          break;
        case SuiteKind::mixing:
          if (config.alternate.kind == AlternateSource::Kind::none)
            throw Error("regime.alternate: mixing suite requires an alternate policy");
          for (double m : s.mix_fractions) {
            r.mix_fraction = m;
            add(name + "_mix" + detail::num_label(m), k, r);
          }
          break;
        case SuiteKind::two_anchor_compare:
        case SuiteKind::clip_sweep: add(name, k, r); break;
      }
    }
  }
  if (suite.arms.empty()) throw Error("suite." + std::string(to_string(s.kind)) + ": no arms");
  for (std::size_t i = 0; i < suite.arms.size(); ++i)
    for (std::size_t j = i + 1; j < suite.arms.size(); ++j)
      if (suite.arms[i].label == suite.arms[j].label) throw Error("suite: duplicate arm label " + suite.arms[i].label);
  for (const Arm& arm : suite.arms) {
    RegimeConfig r = arm.regime;
    if (arm.alternate.kind != AlternateSource::Kind::none) r.alternate.emplace(PolicyParams(2, 1), 0);
    r.validate();
  }
  return suite;
}

struct ArmRun {
  std::size_t arm = 0;
  std::uint64_t seed = 0;
  RunLog log;
};

struct SuiteResult {
  std::vector<ArmRun> runs;  // arm-major, seed-minor
  bool any_diverged = false;
};

inline std::string arm_file_name(const std::string& label, std::uint64_t seed) {
  return label + "_seed" + std::to_string(seed) + ".csv";
}

/// Writes via a temporary file and rename, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out << contents;
    out.flush();
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("cannot write '" + path.string() + "': " + ec.message());
}

/// Runs one (arm, seed) with the seed applied and the alternate sampler resolved.
inline RunLog run_arm(const Arm& arm, std::uint64_t seed) {
  TrainConfig train = arm.train;
  train.seed = seed;
  RegimeConfig regime = arm.regime;
  regime.alternate = resolve_alternate(arm.alternate, train);
  return run_experiment(train, regime).log;
}

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  sd = std::sqrt(var / static_cast<double>(v.size()));
}

inline std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.12e", x);
  return buf;
}

/// Mean reward at `step` over the seeds of one arm that reached it.
inline std::optional<double> seed_mean(const std::vector<const RunLog*>& logs, std::size_t step) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const RunLog* log : logs)
    if (step < log->rows.size()) {
      sum += log->rows[step].mean_reward;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

}  // namespace detail

/// Mean of the last min(window, rows) rewards; NaN for an empty log.
inline double final_mean_reward(const RunLog& log, std::size_t window = kFinalWindow) {
  if (log.rows.empty()) return std::nan("");
  const std::size_t n = std::min(window, log.rows.size());
  double s = 0.0;
  for (std::size_t i = log.rows.size() - n; i < log.rows.size(); ++i) s += log.rows[i].mean_reward;
  return s / static_cast<double>(n);
}

inline double median_ess(const RunLog& log) {
  std::vector<double> e;
  for (const auto& r : log.rows) e.push_back(r.ess);
  return detail::median(std::move(e));
}

/// Summary files for a finished suite. Steps no seed of an arm reached are left empty.
inline void write_suite_summary(const ExperimentSuite& suite, const SuiteResult& result,
                                const std::filesystem::path& dir) {
  std::vector<std::vector<const RunLog*>> by_arm(suite.arms.size());
  for (const ArmRun& r : result.runs) by_arm[r.arm].push_back(&r.log);
  const std::size_t steps = suite.arms.front().train.iterations;

  std::ostringstream arms;
  arms << "arm,seed,status,rows,final_mean_reward,median_ess\n";
  for (const ArmRun& r : result.runs)
    arms << suite.arms[r.arm].label << ',' << r.seed << ',' << (r.log.diverged ? "diverged" : "ok") << ','
         << r.log.rows.size() << ',' << detail::fmt(final_mean_reward(r.log)) << ','
         << detail::fmt(median_ess(r.log)) << '\n';
  write_file_atomic(dir / "arms.csv", arms.str());

  std::ostringstream summary;
  if (suite.kind == SuiteKind::clip_sweep) {
    std::vector<std::size_t> grpo;
    std::size_t p3o = 0;
    for (std::size_t a = 0; a < suite.arms.size(); ++a) {
      if (suite.arms[a].train.objective.kind == ObjectiveKind::p3o) p3o = a;
      else grpo.push_back(a);
    }
    std::ostringstream bands;
    summary << "step,p3o,grpo_mean,grpo_std\n";
    bands << "step,grpo_cross_clip_std,p3o_cross_seed_std\n";
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<double> clip_means;
      for (std::size_t a : grpo)
        if (auto m = detail::seed_mean(by_arm[a], s)) clip_means.push_back(*m);
      const auto p = detail::seed_mean(by_arm[p3o], s);
      summary << s << ',' << (p ? detail::fmt(*p) : "");
      double gm = 0.0, gsd = 0.0;
      if (!clip_means.empty()) detail::mean_std(clip_means, gm, gsd);
      summary << ',' << (clip_means.empty() ? "" : detail::fmt(gm)) << ','
              << (clip_means.empty() ? "" : detail::fmt(gsd)) << '\n';
      std::vector<double> p3o_seeds;
      for (const RunLog* log : by_arm[p3o])
        if (s < log->rows.size()) p3o_seeds.push_back(log->rows[s].mean_reward);
      double pm = 0.0, psd = 0.0;
      if (!p3o_seeds.empty()) detail::mean_std(p3o_seeds, pm, psd);
      bands << s << ',' << (clip_means.empty() ? "" : detail::fmt(gsd)) << ','
            << (p3o_seeds.empty() ? "" : detail::fmt(psd)) << '\n';
    }
    write_file_atomic(dir / "bands.csv", bands.str());
  } else {
    summary << "step";
    for (const Arm& arm : suite.arms) summary << ',' << arm.label;
    summary << '\n';
    for (std::size_t s = 0; s < steps; ++s) {
      summary << s;
      for (std::size_t a = 0; a < suite.arms.size(); ++a) {
        const auto m = detail::seed_mean(by_arm[a], s);
        summary << ',' << (m ? detail::fmt(*m) : "");
      }
      summary << '\n';
    }
  }
  write_file_atomic(dir / "summary.csv", summary.str());
}

using SuiteProgressFn = std::function<void(const Arm&, std::uint64_t seed, const RunLog&)>;

/// Runs every (arm, seed) pair on up to `jobs` threads and writes the output
/// directory. Results do not depend on `jobs`.
inline SuiteResult run_suite(const ExperimentSuite& suite, const std::filesystem::path& dir, std::size_t jobs = 1,
                             const SuiteProgressFn& progress = {}) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw Error("cannot create output directory '" + dir.string() + "'");

  SuiteResult result;
  for (std::size_t a = 0; a < suite.arms.size(); ++a)
    for (std::uint64_t seed : suite.seeds) result.runs.push_back(ArmRun{a, seed, {}});

  std::atomic<std::size_t> next{0};
  std::mutex report_mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < result.runs.size(); i = next++) {
      ArmRun& run = result.runs[i];
      const Arm& arm = suite.arms[run.arm];
      try {
        run.log = run_arm(arm, run.seed);
        std::ostringstream csv;
        write_run_log_csv(csv, run.log);
        write_file_atomic(dir / arm_file_name(arm.label, run.seed), csv.str());
        if (progress) {
          const std::lock_guard lock(report_mu);
          progress(arm, run.seed, run.log);
        }
      } catch (...) {
        const std::lock_guard lock(report_mu);
        if (!failure) failure = std::current_exception();
        next = result.runs.size();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, result.runs.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (const ArmRun& r : result.runs) result.any_diverged = result.any_diverged || r.log.diverged;
  write_suite_summary(suite, result, dir);
  return result;
}

}  // namespace esslab
