// Copyright 2026 The esslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Rollout / update loop with off-policy regime injection.
//
// A regime perturbs the sampler relative to the parameters being trained:
//   staleness k     the sampler is the snapshot taken k iterations ago
//   temperature T   the sampler draws from softmax(logits / T)
//   quantize step q the sampler's logits are rounded to multiples of q
//   mix fraction    each prompt group comes from an alternate snapshot with
//                   this probability
// Training-side log-probs always use the live parameters at T = 1.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "esslab/core.hpp"
#include "esslab/error.hpp"
#include "esslab/objectives.hpp"
#include "esslab/optimizer.hpp"
#include "esslab/policy.hpp"
#include "esslab/rng.hpp"
#include "esslab/tasks.hpp"

namespace esslab {

struct RegimeConfig {
  std::size_t staleness = 0;
  double rollout_temperature = 1.0;
  double quantize_step = 0.0;  // 0: off
  double mix_fraction = 0.0;
  std::optional<PolicySnapshot> alternate;
  std::size_t epochs_per_rollout = 1;

  void validate() const {
    if (!(rollout_temperature > 0.0) || !std::isfinite(rollout_temperature))
      throw Error("temperature must be positive");
    if (!(quantize_step >= 0.0)) throw Error("regime.quantize_step must be nonnegative");
    if (!(mix_fraction >= 0.0 && mix_fraction <= 1.0)) throw Error("regime.mix_fraction must be in [0, 1]");
    if (mix_fraction > 0.0 && !alternate) throw Error("regime.mix_fraction requires an alternate policy");
    if (epochs_per_rollout < 1) throw Error("regime.epochs_per_rollout must be at least 1");
  }
};

/// Starting point of a run. `sft` fits the policy to teacher-forced task
/// demonstrations before any RL step, standing in for a pretrained model.
struct InitConfig {
  enum class Kind { uniform, sft } kind = Kind::uniform;
  std::size_t sft_demos = 0;
  double sft_lr = 0.0;
};

struct TrainConfig {
  TaskSpec task;
  std::size_t context_order = 6;
  std::size_t group_size = 8;
  std::size_t prompts_per_iter = 16;
  std::size_t max_tokens = 0;  // 0: longest target of the task
  ObjectiveSpec objective;
  AdvantageOptions advantage;
  OptimizerConfig optimizer;
  InitConfig init;
  double beta_ent = 0.0;
  double eta = 0.0;
  std::uint64_t seed = 1;
  std::size_t iterations = 100;
  std::size_t shards = 1;

  std::size_t effective_max_tokens() const { return max_tokens ? max_tokens : task.max_target_len(); }

  void validate() const {
    task.validate();
    if (context_order < 1) throw Error("policy.context_order must be at least 1");
    if (group_size < 2) throw Error("train.group_size must be at least 2");
    if (prompts_per_iter < 1) throw Error("train.prompts_per_iter must be at least 1");
    if (iterations < 1) throw Error("train.iterations must be at least 1");
    if (!(beta_ent >= 0.0)) throw Error("train.beta_ent must be nonnegative");
    if (!(eta >= 0.0)) throw Error("train.eta must be nonnegative");
    if (shards < 1) throw Error("train.shards must be at least 1");
    if (!(advantage.eps_std >= 0.0)) throw Error("train.adv_eps must be nonnegative");
    if (!(init.sft_lr >= 0.0)) throw Error("init.sft_lr must be nonnegative");
    objective.clip.validate();
    optimizer.validate();
  }
};

// Stream purposes; combined with (iteration, index) into stream ids.
inline constexpr std::uint64_t kRolloutStream = 1;
inline constexpr std::uint64_t kEvalStream = 2;
inline constexpr std::uint64_t kInitStream = 3;

/// Snapshots of the live parameters, newest last.
class SnapshotHistory {
 public:
  explicit SnapshotHistory(std::size_t max_lag = 0) : max_lag_(max_lag) {}

  void push(PolicySnapshot s) {
    items_.push_back(std::move(s));
    while (items_.size() > max_lag_ + 1) items_.pop_front();
  }
  /// Snapshot taken `lag` pushes ago (0 = newest).
  const PolicySnapshot& at_lag(std::size_t lag) const {
    if (lag >= items_.size()) throw Error("insufficient history for staleness " + std::to_string(lag));
    return items_[items_.size() - 1 - lag];
  }
  std::size_t size() const { return items_.size(); }

 private:
  std::size_t max_lag_;
  std::deque<PolicySnapshot> items_;
};

/// Samples P prompt groups of G completions under the regime's sampler, scores
/// them and writes group-relative advantages. Each prompt draws from its own
/// stream (seed, iteration, prompt index), so the result does not depend on
/// evaluation order.
inline std::vector<RolloutGroup> rollout_epoch(const PolicyParams& current, const RegimeConfig& regime,
                                               const SnapshotHistory& history, const TrainConfig& config,
                                               std::uint64_t iteration) {
  regime.validate();
  const PolicyParams* behavior = &current;
  if (regime.staleness > 0) behavior = &history.at_lag(regime.staleness).params();
  const PolicyParams* alternate = regime.alternate ? &regime.alternate->params() : nullptr;
  if (alternate && !alternate->same_shape(current)) throw Error("alternate policy differs in shape");

  std::optional<PolicySnapshot> quantized, quantized_alt;
  if (regime.quantize_step > 0.0) {
    quantized = quantize_logits(*behavior, regime.quantize_step);
    behavior = &quantized->params();
    if (alternate && regime.mix_fraction > 0.0) {
      quantized_alt = quantize_logits(*alternate, regime.quantize_step);
      alternate = &quantized_alt->params();
    }
  }

  const ContextEncoder encoder(current);
  const TaskSpec& task = config.task;
  const std::size_t max_tokens = config.effective_max_tokens();
  std::vector<RolloutGroup> groups;
  groups.reserve(config.prompts_per_iter);
  for (std::size_t p = 0; p < config.prompts_per_iter; ++p) {
    Rng rng(config.seed, stream_id({kRolloutStream, iteration, p}));
    const TaskInstance inst = make_prompt(task, rng);
    const bool use_alt = regime.mix_fraction > 0.0 && rng.bernoulli(regime.mix_fraction);
    const PolicyParams& sampler = use_alt ? *alternate : *behavior;

    RolloutGroup group;
    group.prompt = inst.prompt;
    std::vector<double> rewards;
    for (std::size_t j = 0; j < config.group_size; ++j) {
      SequenceRollout s = sample_completion(sampler, encoder, inst.prompt, max_tokens, regime.rollout_temperature,
                                            rng, task.eos());
      s.reward = score_completion(task, inst.prompt, inst.target, s.completion);
      s.behavior.staleness = use_alt ? 0 : regime.staleness;
      s.behavior.quantize_step = regime.quantize_step;
      s.behavior.alternate = use_alt;
      rewards.push_back(s.reward);
      group.members.push_back(std::move(s));
    }
    const auto adv = group_advantage(rewards, config.advantage);
    for (std::size_t j = 0; j < group.members.size(); ++j)
      for (auto& r : group.members[j].records) r.advantage = adv[j];
    groups.push_back(std::move(group));
  }
  return groups;
}

struct RunLogRow {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double ess = 0.0;
  double clip_fraction = 0.0;
  double kl_behavior = 0.0;
  double entropy = 0.0;
  double grad_norm = 0.0;  // before clipping
};

struct RunLog {
  std::vector<RunLogRow> rows;
  bool diverged = false;
  std::string message;
};

inline constexpr const char* kRunLogHeader = "step,mean_reward,ess,clip_fraction,kl_behavior,entropy,grad_norm";

inline void write_run_log_csv(std::ostream& os, const RunLog& log) {
  os << kRunLogHeader << "\n";
  char buf[256];
  for (const auto& r : log.rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.12e,%.12e,%.12e,%.12e,%.12e,%.12e\n", r.step, r.mean_reward, r.ess,
                  r.clip_fraction, r.kl_behavior, r.entropy, r.grad_norm);
    os << buf;
  }
}

/// Recomputes current (and, given a snapshot, proximal) log-probs at T = 1.
inline void refresh_log_probs(FlatBatch& batch, const PolicyParams& params, const PolicySnapshot* proximal) {
  for (auto& r : batch.records) {
    r.logp_current = log_prob(params, r.context_id, r.token_id);
    if (proximal) r.logp_proximal = log_prob(proximal->params(), r.context_id, r.token_id);
  }
}

namespace detail {
inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}
}  // namespace detail

/// epochs_per_rollout optimizer steps on one rollout batch. Throws
/// DivergedError on a non-finite loss, gradient or parameter.
inline RunLogRow train_iteration(PolicyParams& params, const std::vector<RolloutGroup>& groups,
                                 const TrainConfig& config, const RegimeConfig& regime, OptimizerState& opt,
                                 const PolicySnapshot* reference, std::size_t step) {
  if (groups.empty()) throw Error("empty batch");
  FlatBatch batch = flatten_groups(groups);
  const auto& spec = config.objective;
  const bool wants_prox = needs_proximal(spec.kind) ||
                          (spec.kind == ObjectiveKind::p3o && spec.p3o.axis == RatioAxis::proximal);
  const std::size_t total_steps = config.optimizer.total_steps
                                      ? config.optimizer.total_steps
                                      : config.iterations * regime.epochs_per_rollout;

  RunLogRow row;
  row.step = step;
  double reward_sum = 0.0;
  std::size_t members = 0;
  for (const auto& g : groups)
    for (const auto& m : g.members) {
      reward_sum += m.reward;
      ++members;
    }
  row.mean_reward = reward_sum / static_cast<double>(members);

  for (std::size_t epoch = 0; epoch < regime.epochs_per_rollout; ++epoch) {
    std::optional<PolicySnapshot> prox;
    if (wants_prox) prox.emplace(params, static_cast<std::int64_t>(step));
    refresh_log_probs(batch, params, prox ? &*prox : nullptr);

    ObjectiveExtras extras;
    extras.proximal = prox ? &*prox : nullptr;
    extras.reference = config.eta > 0.0 ? reference : nullptr;
    extras.eta = config.eta;
    extras.beta_ent = config.beta_ent;
    ObjectiveOutput out = evaluate_objective(spec, batch, params, extras, EvalOptions{config.shards, nullptr});
    const Diagnostics& d = out.diagnostics;
    if (!std::isfinite(out.loss) || !std::isfinite(d.ess) || !detail::all_finite(out.grad))
      throw DivergedError("non-finite loss or gradient at step " + std::to_string(step));

    const double norm = clip_grad_norm(out.grad, config.optimizer.grad_clip_norm);
    const double lr = warmup_cosine_lr(opt.step + 1, config.optimizer.lr, config.optimizer.warmup_ratio, total_steps);
    adamw_step(params.logits(), out.grad, opt, config.optimizer, lr);
    if (!detail::all_finite(params.logits()))
      throw DivergedError("non-finite parameters at step " + std::to_string(step));

    row.ess += d.ess;
    row.clip_fraction += d.clip_fraction;
    row.kl_behavior += d.mean_kl_behavior;
    row.entropy += d.entropy;
    row.grad_norm += norm;
  }
  const double epochs = static_cast<double>(regime.epochs_per_rollout);
  row.ess /= epochs;
  row.clip_fraction /= epochs;
  row.kl_behavior /= epochs;
  row.entropy /= epochs;
  row.grad_norm /= epochs;
  return row;
}

/// Supervised warm start: full-softmax cross-entropy steps on teacher-forced
/// demonstrations drawn from the task distribution.
inline PolicyParams initial_policy(const TrainConfig& config) {
  PolicyParams params(config.task.vocab_size, config.context_order);
  if (config.init.kind == InitConfig::Kind::uniform) return params;
  const ContextEncoder encoder(params);
  for (std::size_t d = 0; d < config.init.sft_demos; ++d) {
    Rng rng(config.seed, stream_id({kInitStream, d}));
    const TaskInstance inst = make_prompt(config.task, rng);
    TokenSeq prefix;
    for (Token t : inst.target) {
      const auto ctx = encoder.encode(inst.prompt, prefix);
      const auto g = grad_log_prob(params, ctx, t);
      auto row = params.row(ctx);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += config.init.sft_lr * g[j];
      prefix.push_back(t);
    }
  }
  return params;
}

struct ExperimentResult {
  RunLog log;
  PolicyParams params;
};

using ProgressFn = std::function<void(const RunLogRow&)>;

/// N iterations of rollout + update. Divergence ends the run with the rows
/// logged so far and log.diverged set.
inline ExperimentResult run_experiment(const TrainConfig& config, const RegimeConfig& regime,
                                       const ProgressFn& progress = {}) {
  config.validate();
  regime.validate();
  ExperimentResult result{RunLog{}, initial_policy(config)};
  PolicyParams& params = result.params;

  std::optional<PolicySnapshot> reference;
  if (config.eta > 0.0) reference.emplace(params, 0);

  // The history starts filled with the initial policy, so lag k is defined from iteration 0.
  SnapshotHistory history(regime.staleness);
  if (regime.staleness > 0) {
    const PolicySnapshot init(params, 0);
    for (std::size_t i = 0; i < regime.staleness; ++i) history.push(init);
  }

  OptimizerState opt(params.size());
  for (std::size_t it = 0; it < config.iterations; ++it) {
    if (regime.staleness > 0) history.push(PolicySnapshot(params, static_cast<std::int64_t>(it)));
    const auto groups = rollout_epoch(params, regime, history, config, it);
    try {
      const RunLogRow row =
          train_iteration(params, groups, config, regime, opt, reference ? &*reference : nullptr, it);
      result.log.rows.push_back(row);
      if (progress) progress(row);
    } catch (const DivergedError& e) {
      result.log.diverged = true;
      result.log.message = e.what();
      break;
    }
  }
  return result;
}

/// Fraction of n_prompts fresh task instances solved exactly by greedy decoding.
inline double eval_success_rate(const PolicyParams& params, const TaskSpec& task, std::size_t n_prompts, Rng& rng,
                                std::size_t max_tokens = 0) {
  if (n_prompts < 1) throw Error("n_prompts must be at least 1");
  if (params.vocab_size() != task.vocab_size) throw Error("policy and task vocabularies differ");
  if (max_tokens == 0) max_tokens = task.max_target_len();
  const ContextEncoder encoder(params);
  std::size_t solved = 0;
  for (std::size_t i = 0; i < n_prompts; ++i) {
    const TaskInstance inst = make_prompt(task, rng);
    const TokenSeq out = greedy_completion(params, encoder, inst.prompt, max_tokens, task.eos());
    if (score_completion(task, inst.prompt, inst.target, out) == 1.0) ++solved;
  }
  return static_cast<double>(solved) / static_cast<double>(n_prompts);
}

}  // namespace esslab
