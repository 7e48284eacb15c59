// Copyright 2026 The esslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Surrogate losses over a FlatBatch with exact analytic gradients.
//
// Every loss is a batch-token average: per-token terms are divided by the
// number of valid tokens |B| (GSPO averages per-sequence terms over the
// sequences that own at least one valid token). Gradients are dense over the
// logit table and flow through the current policy only; ESS values and cap
// weights are stop-gradient constants.
//
// Evaluation can be split into contiguous record shards that run
// concurrently. Partial sums are always combined in shard order, so results
// do not depend on thread timing.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <future>
#include <limits>
#include <optional>
#include <ranges>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "esslab/core.hpp"
#include "esslab/error.hpp"
#include "esslab/policy.hpp"

namespace esslab {

enum class ObjectiveKind { reinforce, grpo, dapo, gspo, decoupled, p3o, two_anchor };

inline constexpr ObjectiveKind kAllObjectives[] = {ObjectiveKind::reinforce, ObjectiveKind::grpo,
                                                   ObjectiveKind::dapo,      ObjectiveKind::gspo,
                                                   ObjectiveKind::decoupled, ObjectiveKind::p3o,
                                                   ObjectiveKind::two_anchor};

inline std::string_view to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::reinforce: return "reinforce";
    case ObjectiveKind::grpo: return "grpo";
    case ObjectiveKind::dapo: return "dapo";
    case ObjectiveKind::gspo: return "gspo";
    case ObjectiveKind::decoupled: return "decoupled";
    case ObjectiveKind::p3o: return "p3o";
    case ObjectiveKind::two_anchor: return "two_anchor";
  }
  return "?";
}

inline ObjectiveKind parse_objective_kind(std::string_view s) {
  for (ObjectiveKind k : kAllObjectives)
    if (to_string(k) == s) return k;
  throw Error("unknown objective '" + std::string(s) + "'");
}

/// Fixed-clip objectives need a clip range; the ESS-driven ones take none.
inline bool uses_clip_range(ObjectiveKind k) {
  return k == ObjectiveKind::grpo || k == ObjectiveKind::dapo || k == ObjectiveKind::gspo ||
         k == ObjectiveKind::decoupled;
}

/// Objectives that read proximal log-probs from the batch.
inline bool needs_proximal(ObjectiveKind k) {
  return k == ObjectiveKind::decoupled || k == ObjectiveKind::two_anchor;
}

struct ClipOptions {
  double eps_low = 0.2;
  double eps_high = 0.2;
  double eps_seq = 0.2;  // GSPO, symmetric
  double c_w = 2.0;      // decoupled behavior-weight cap

  void validate() const {
    for (double e : {eps_low, eps_high, eps_seq})
      if (!(e >= 0.0)) throw Error("clip.eps ranges must be nonnegative");
    if (eps_low > 1.0 || eps_seq > 1.0) throw Error("clip.eps_low and clip.eps_seq must be at most 1");
    if (!(c_w > 0.0)) throw Error("clip.c_w must be positive");
  }
};

struct AdvantageOptions {
  double eps_std = 1e-4;
};

/// Which snapshot the ESS-adaptive objective measures drift against.
enum class RatioAxis { behavior, proximal };

struct P3OOptions {
  RatioAxis axis = RatioAxis::behavior;
};

struct Diagnostics {
  double ess = 1.0;
  double clip_fraction = 0.0;
  double mean_kl_behavior = 0.0;
  double mean_kl_reference = 0.0;
  double entropy = 0.0;
};

/// Values treated as constants by backpropagation. Objectives report the values
/// they used; passing them back in pins them (finite-difference probing).
struct StopGradient {
  double ess_behavior = std::numeric_limits<double>::quiet_NaN();
  double ess_proximal = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> cap_weights;  // per record; 0 for invalid records
};

struct EvalOptions {
  std::size_t shards = 1;
  const StopGradient* frozen = nullptr;
};

struct ObjectiveOutput {
  double loss = 0.0;
  std::vector<double> grad;
  Diagnostics diagnostics;
  StopGradient frozen;
};

// ---------------------------------------------------------------------------
// Advantages, ratios, ESS.

/// A_j = (r_j - mean) / (population std + eps). All-equal rewards give zeros.
inline std::vector<double> group_advantage(std::span<const double> rewards, AdvantageOptions opts = {}) {
  if (rewards.size() < 2) throw Error("degenerate group");
  if (!(opts.eps_std >= 0.0)) throw Error("eps_std must be nonnegative");
  const double g = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= g;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= g;
  std::vector<double> adv(rewards.size(), 0.0);
  const double denom = std::sqrt(var) + opts.eps_std;
  if (var == 0.0 || denom == 0.0) return adv;
  for (std::size_t j = 0; j < rewards.size(); ++j) adv[j] = (rewards[j] - mean) / denom;
  return adv;
}

inline std::vector<double> group_advantage(const std::vector<double>& rewards, AdvantageOptions opts = {}) {
  return group_advantage(std::span<const double>(rewards), opts);
}

/// rho_t = exp(logp_current - logp_against) for every record (mask ignored).
inline std::vector<double> compute_ratios(const FlatBatch& batch, RatioAxis against) {
  std::vector<double> out;
  out.reserve(batch.records.size());
  for (const auto& r : batch.records) {
    double ref = r.logp_behavior;
    if (against == RatioAxis::proximal) {
      if (!r.logp_proximal) throw Error("missing proximal log-probs");
      ref = *r.logp_proximal;
    }
    out.push_back(std::exp(r.logp_current - ref));
  }
  return out;
}

/// Running sums for (sum rho)^2 / (n sum rho^2). Merging is exact up to
/// floating-point association, so shards must be merged in a fixed order.
struct EssAccumulator {
  double sum = 0.0;
  double sum_sq = 0.0;
  std::size_t count = 0;

  void add(double rho) {
    if (rho < 0.0) throw Error("negative ratio");
    sum += rho;
    sum_sq += rho * rho;
    ++count;
  }
  void merge(const EssAccumulator& o) {
    sum += o.sum;
    sum_sq += o.sum_sq;
    count += o.count;
  }
  /// In [1/n, 1]; NaN when a ratio overflowed.
  double value() const {
    if (count == 0) throw Error("empty mask");
    if (!std::isfinite(sum) || !std::isfinite(sum_sq)) return std::numeric_limits<double>::quiet_NaN();
    if (sum_sq == 0.0) throw Error("vanished ratios");
    const double n = static_cast<double>(count);
    const double e = (sum * sum) / (n * sum_sq);
    return std::min(1.0, std::max(1.0 / n, e));
  }
};

/// ESS over masked ratios, reduced over `shards` contiguous blocks in order.
template <std::ranges::random_access_range Ratios, std::ranges::random_access_range Mask>
double ess(const Ratios& ratios, const Mask& mask, std::size_t shards = 1) {
  const std::size_t n = std::ranges::size(ratios);
  if (std::ranges::size(mask) != n) throw Error("length mismatch");
  shards = std::clamp<std::size_t>(shards, 1, std::max<std::size_t>(n, 1));
  EssAccumulator total;
  for (std::size_t s = 0; s < shards; ++s) {
    EssAccumulator part;
    const std::size_t b = n * s / shards, e = n * (s + 1) / shards;
    for (std::size_t i = b; i < e; ++i)
      if (mask[i]) part.add(static_cast<double>(ratios[i]));
    total.merge(part);
  }
  return total.value();
}

/// Per-context mixture of behavior and proximal anchors, each weighted by
/// (1 - its ESS). Returns log-probabilities; nullopt when both weights vanish.
inline std::optional<std::vector<double>> mixture_logdist(std::span<const double> log_behavior,
                                                          std::span<const double> log_proximal, double e_behavior,
                                                          double e_proximal) {
  const double wb = 1.0 - e_behavior;
  const double wp = 1.0 - e_proximal;
  if (wb + wp <= 0.0) return std::nullopt;
  std::vector<double> out(log_behavior.size());
  for (std::size_t j = 0; j < out.size(); ++j)
    out[j] = std::log((wb * std::exp(log_behavior[j]) + wp * std::exp(log_proximal[j])) / (wb + wp));
  return out;
}

// ---------------------------------------------------------------------------

namespace detail {

/// Current-policy log-distributions (T = 1) for every record.
struct BatchEval {
  std::size_t vocab = 0;
  std::vector<double> logdist;  // records x V
  std::vector<double> logp;     // sampled token
  std::vector<bool> mask;

  BatchEval(const FlatBatch& batch, const PolicyParams& params) : vocab(params.vocab_size()) {
    if (batch.mask_count == 0) throw Error("empty batch");
    const std::size_t n = batch.records.size();
    logdist.resize(n * vocab);
    logp.resize(n);
    mask.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = batch.records[i];
      check_context(params, r.context_id);
      check_token(params, r.token_id);
      std::span<double> row(logdist.data() + i * vocab, vocab);
      log_softmax(params.row(r.context_id), 1.0, row);
      logp[i] = row[static_cast<std::size_t>(r.token_id)];
      mask[i] = r.valid;
    }
  }
  std::span<const double> row(std::size_t i) const { return {logdist.data() + i * vocab, vocab}; }
};

struct Partial {
  double loss = 0.0;
  std::vector<double> grad;
  double clipped = 0.0;
  double kl_behavior = 0.0;
  double kl_reference = 0.0;
  double entropy = 0.0;
};

/// Calls fn(i, partial) for every valid record, shard by shard, and combines
/// shard partials in index order.
template <class Fn>
Partial reduce_valid(const FlatBatch& batch, std::size_t grad_size, std::size_t shards, Fn&& fn) {
  const std::size_t n = batch.records.size();
  shards = std::clamp<std::size_t>(shards, 1, std::max<std::size_t>(n, 1));
  auto run = [&](std::size_t s) {
    Partial p;
    p.grad.assign(grad_size, 0.0);
    const std::size_t b = n * s / shards, e = n * (s + 1) / shards;
    for (std::size_t i = b; i < e; ++i)
      if (batch.records[i].valid) fn(i, p);
    return p;
  };
  std::vector<Partial> parts;
  if (shards == 1) {
    parts.push_back(run(0));
  } else {
    std::vector<std::future<Partial>> futures;
    for (std::size_t s = 0; s < shards; ++s) futures.push_back(std::async(std::launch::async, run, s));
    for (auto& f : futures) parts.push_back(f.get());
  }
  Partial total = std::move(parts[0]);
  for (std::size_t s = 1; s < parts.size(); ++s) {
    const Partial& p = parts[s];
    total.loss += p.loss;
    total.clipped += p.clipped;
    total.kl_behavior += p.kl_behavior;
    total.kl_reference += p.kl_reference;
    total.entropy += p.entropy;
    for (std::size_t k = 0; k < grad_size; ++k) total.grad[k] += p.grad[k];
  }
  return total;
}

/// grad[row] += coef * (e_token - pi).
inline void add_score(std::vector<double>& grad, std::size_t vocab, std::uint32_t ctx, std::span<const double> logdist,
                      Token token, double coef) {
  if (coef == 0.0) return;
  double* g = grad.data() + static_cast<std::size_t>(ctx) * vocab;
  for (std::size_t j = 0; j < vocab; ++j) g[j] -= coef * std::exp(logdist[j]);
  g[static_cast<std::size_t>(token)] += coef;
}

inline void add_row(std::vector<double>& grad, std::size_t vocab, std::uint32_t ctx, std::span<const double> row_grad,
                    double coef) {
  if (coef == 0.0) return;
  double* g = grad.data() + static_cast<std::size_t>(ctx) * vocab;
  for (std::size_t j = 0; j < vocab; ++j) g[j] += coef * row_grad[j];
}

/// Diagnostics that every objective reports: entropy and KL to the sampler.
inline void add_common(const FlatBatch& batch, const BatchEval& ev, std::size_t i, Partial& p) {
  p.entropy += entropy_from_logdist(ev.row(i)).value;
  if (batch.has_behavior_dists()) p.kl_behavior += kl_from_logdists(ev.row(i), batch.behavior_row(i)).value;
}

inline double ess_of(const FlatBatch& batch, const BatchEval& ev, RatioAxis axis, std::size_t shards) {
  std::vector<double> rho(batch.records.size(), 0.0);
  for (std::size_t i = 0; i < rho.size(); ++i) {
    if (!ev.mask[i]) continue;
    const auto& r = batch.records[i];
    double ref = r.logp_behavior;
    if (axis == RatioAxis::proximal) {
      if (!r.logp_proximal) throw Error("missing proximal log-probs");
      ref = *r.logp_proximal;
    }
    rho[i] = std::exp(ev.logp[i] - ref);
  }
  return ess(rho, ev.mask, shards);
}

inline ObjectiveOutput finish(Partial&& p, const FlatBatch& batch, double ess_value) {
  const double n = static_cast<double>(batch.mask_count);
  ObjectiveOutput out;
  out.loss = p.loss;
  out.grad = std::move(p.grad);
  out.diagnostics.ess = ess_value;
  out.diagnostics.clip_fraction = p.clipped / n;
  out.diagnostics.mean_kl_behavior = p.kl_behavior / n;
  out.diagnostics.entropy = p.entropy / n;
  return out;
}

inline double proximal_logp(const TokenRecord& r) {
  if (!r.logp_proximal) throw Error("missing proximal log-probs");
  return *r.logp_proximal;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Objectives.

/// -<log pi(y|c) A>_M. Ratios are ignored.
inline ObjectiveOutput reinforce_loss(const FlatBatch& batch, const PolicyParams& params, EvalOptions opt = {}) {
  const detail::BatchEval ev(batch, params);
  const double n = static_cast<double>(batch.mask_count);
  auto part = detail::reduce_valid(batch, params.size(), opt.shards, [&](std::size_t i, detail::Partial& p) {
    const auto& r = batch.records[i];
    p.loss -= ev.logp[i] * r.advantage / n;
    detail::add_score(p.grad, ev.vocab, r.context_id, ev.row(i), r.token_id, -r.advantage / n);
    detail::add_common(batch, ev, i, p);
  });
  return detail::finish(std::move(part), batch, detail::ess_of(batch, ev, RatioAxis::behavior, opt.shards));
}

/// -<min(rho A, clip(rho, 1 - eps_low, 1 + eps_high) A)>_M with rho against the
/// behavior policy. GRPO is eps_low == eps_high; DAPO decouples them. Ties
/// between the branches count as unclipped.
inline ObjectiveOutput clip_surrogate_loss(const FlatBatch& batch, const PolicyParams& params, const ClipOptions& clip,
                                           EvalOptions opt = {}) {
  clip.validate();
  const detail::BatchEval ev(batch, params);
  const double n = static_cast<double>(batch.mask_count);
  auto part = detail::reduce_valid(batch, params.size(), opt.shards, [&](std::size_t i, detail::Partial& p) {
    const auto& r = batch.records[i];
    const double rho = std::exp(ev.logp[i] - r.logp_behavior);
    const double clipped = std::clamp(rho, 1.0 - clip.eps_low, 1.0 + clip.eps_high);
    const double a = r.advantage;
    if (rho * a <= clipped * a) {
      p.loss -= rho * a / n;
      detail::add_score(p.grad, ev.vocab, r.context_id, ev.row(i), r.token_id, -a * rho / n);
    } else {
      p.loss -= clipped * a / n;
      p.clipped += 1.0;
    }
    detail::add_common(batch, ev, i, p);
  });
  return detail::finish(std::move(part), batch, detail::ess_of(batch, ev, RatioAxis::behavior, opt.shards));
}

/// Sequence-level clip on the geometric-mean ratio S = exp(mean_t log rho_t),
/// averaged over sequences. clip_fraction counts tokens of clipped sequences.
inline ObjectiveOutput gspo_loss(const FlatBatch& batch, const PolicyParams& params, const ClipOptions& clip,
                                 EvalOptions opt = {}) {
  clip.validate();
  const detail::BatchEval ev(batch, params);
  std::size_t num_seq = 0;
  for (const auto& r : batch.records) num_seq = std::max<std::size_t>(num_seq, r.sequence + 1);
  std::vector<double> log_sum(num_seq, 0.0), adv(num_seq, 0.0);
  std::vector<std::size_t> len(num_seq, 0);
  for (std::size_t i = 0; i < batch.records.size(); ++i) {
    const auto& r = batch.records[i];
    if (!r.valid) continue;
    log_sum[r.sequence] += ev.logp[i] - r.logp_behavior;
    adv[r.sequence] = r.advantage;
    ++len[r.sequence];
  }
  const double active = static_cast<double>(std::count_if(len.begin(), len.end(), [](std::size_t l) { return l > 0; }));
  struct SeqTerm {
    double loss = 0.0;  // share of the sequence loss carried by each token
    double coef = 0.0;  // d loss / d log pi for each token
    bool clipped = false;
  };
  std::vector<SeqTerm> terms(num_seq);
  for (std::size_t s = 0; s < num_seq; ++s) {
    if (len[s] == 0) continue;
    const double t = static_cast<double>(len[s]);
    const double seq_ratio = std::exp(log_sum[s] / t);
    const double clipped = std::clamp(seq_ratio, 1.0 - clip.eps_seq, 1.0 + clip.eps_seq);
    const double a = adv[s];
    if (seq_ratio * a <= clipped * a) {
      terms[s] = {-seq_ratio * a / (active * t), -a * seq_ratio / (t * active), false};
    } else {
      terms[s] = {-clipped * a / (active * t), 0.0, true};
    }
  }
  auto part = detail::reduce_valid(batch, params.size(), opt.shards, [&](std::size_t i, detail::Partial& p) {
    const auto& r = batch.records[i];
    const SeqTerm& term = terms[r.sequence];
    p.loss += term.loss;
    if (term.clipped) p.clipped += 1.0;
    detail::add_score(p.grad, ev.vocab, r.context_id, ev.row(i), r.token_id, term.coef);
    detail::add_common(batch, ev, i, p);
  });
  return detail::finish(std::move(part), batch, detail::ess_of(batch, ev, RatioAxis::behavior, opt.shards));
}

/// -sg(clip(pi_prox / pi_b, 0, c_w)) * min(r A, clip(r, 1 - eps_low, 1 + eps_high) A),
/// r = pi / pi_prox.
inline ObjectiveOutput decoupled_loss(const FlatBatch& batch, const PolicyParams& params, const ClipOptions& clip,
                                      EvalOptions opt = {}) {
  clip.validate();
  const detail::BatchEval ev(batch, params);
  for (const auto& r : batch.records)
    if (r.valid) detail::proximal_logp(r);
  const double n = static_cast<double>(batch.mask_count);
  auto part = detail::reduce_valid(batch, params.size(), opt.shards, [&](std::size_t i, detail::Partial& p) {
    const auto& r = batch.records[i];
    const double lprox = *r.logp_proximal;
    const double w = std::min(std::exp(lprox - r.logp_behavior), clip.c_w);
    const double ratio = std::exp(ev.logp[i] - lprox);
    const double clipped = std::clamp(ratio, 1.0 - clip.eps_low, 1.0 + clip.eps_high);
    const double a = r.advantage;
    if (ratio * a <= clipped * a) {
      p.loss -= w * ratio * a / n;
      detail::add_score(p.grad, ev.vocab, r.context_id, ev.row(i), r.token_id, -w * a * ratio / n);
    } else {
      p.loss -= w * clipped * a / n;
      p.clipped += 1.0;
    }
    detail::add_common(batch, ev, i, p);
  });
  return detail::finish(std::move(part), batch, detail::ess_of(batch, ev, RatioAxis::behavior, opt.shards));
}

/// ESS-adaptive objective:
///   -<sg(min(rho, e)) log pi(y|c) A>_M + (1 - e) <KL(pi(.|c) || pi_anchor(.|c))>_M
/// with e the ESS of rho over the whole batch. The anchor is the behavior
/// sampler by default (KL against the recorded behavior distributions); with
/// RatioAxis::proximal it is the proximal snapshot.
inline ObjectiveOutput p3o_loss(const FlatBatch& batch, const PolicyParams& params, P3OOptions p3o = {},
                                EvalOptions opt = {}, const PolicySnapshot* proximal = nullptr) {
  const detail::BatchEval ev(batch, params);
  const bool behavior_axis = p3o.axis == RatioAxis::behavior;
  if (behavior_axis && !batch.has_behavior_dists()) throw Error("missing behavior distributions");
  if (!behavior_axis && proximal == nullptr) throw Error("missing proximal snapshot");
  if (!behavior_axis && !proximal->params().same_shape(params)) throw Error("policies differ in shape");

  const std::size_t n_rec = batch.records.size();
  std::vector<double> rho(n_rec, 0.0);
  for (std::size_t i = 0; i < n_rec; ++i) {
    if (!ev.mask[i]) continue;
    const auto& r = batch.records[i];
    rho[i] = std::exp(ev.logp[i] - (behavior_axis ? r.logp_behavior : detail::proximal_logp(r)));
  }
  const StopGradient* frozen = opt.frozen;
  const double e = frozen ? frozen->ess_behavior : ess(rho, ev.mask, opt.shards);
  std::vector<double> weights(n_rec, 0.0);
  if (frozen) {
    if (frozen->cap_weights.size() != n_rec) throw Error("frozen weights do not match batch");
    weights = frozen->cap_weights;
  } else {
    for (std::size_t i = 0; i < n_rec; ++i)
      if (ev.mask[i]) weights[i] = std::min(rho[i], e);
  }

  const double n = static_cast<double>(batch.mask_count);
  const double kl_coef = 1.0 - e;
  auto part = detail::reduce_valid(batch, params.size(), opt.shards, [&](std::size_t i, detail::Partial& p) {
    const auto& r = batch.records[i];
    p.loss -= weights[i] * ev.logp[i] * r.advantage / n;
    detail::add_score(p.grad, ev.vocab, r.context_id, ev.row(i), r.token_id, -weights[i] * r.advantage / n);
    if (kl_coef != 0.0) {
      ValueGrad kl;
      if (behavior_axis) {
        kl = kl_from_logdists(ev.row(i), batch.behavior_row(i));
      } else {
        std::vector<double> lq(ev.vocab);
        log_softmax(proximal->params().row(r.context_id), 1.0, lq);
        kl = kl_from_logdists(ev.row(i), lq);
      }
      p.loss += kl_coef * kl.value / n;
      detail::add_row(p.grad, ev.vocab, r.context_id, kl.grad, kl_coef / n);
    }
    detail::add_common(batch, ev, i, p);
  });
  ObjectiveOutput out = detail::finish(std::move(part), batch, e);
  out.frozen.ess_behavior = e;
  out.frozen.cap_weights = std::move(weights);
  return out;
}

/// Two-anchor variant: score weight sg(min(r_b, e_mix)) with e_mix = min(e_b, e_prox),
/// regularizer (1 - e_mix) KL(pi || pi_mix) toward the (1 - ESS)-weighted mixture
/// of the behavior distribution and the proximal snapshot. When both ESS values
/// are 1 the regularizer is defined as 0.
inline ObjectiveOutput two_anchor_loss(const FlatBatch& batch, const PolicyParams& params,
                                       const PolicySnapshot& prox_snapshot, EvalOptions opt = {}) {
  const detail::BatchEval ev(batch, params);
  if (!batch.has_behavior_dists()) throw Error("missing behavior distributions");
  if (!prox_snapshot.params().same_shape(params)) throw Error("policies differ in shape");
  const std::size_t n_rec = batch.records.size();
  std::vector<double> r_b(n_rec, 0.0), r_prox(n_rec, 0.0);
  for (std::size_t i = 0; i < n_rec; ++i) {
    if (!ev.mask[i]) continue;
    const auto& r = batch.records[i];
    r_b[i] = std::exp(ev.logp[i] - r.logp_behavior);
    r_prox[i] = std::exp(ev.logp[i] - detail::proximal_logp(r));
  }
  const StopGradient* frozen = opt.frozen;
  const double e_b = frozen ? frozen->ess_behavior : ess(r_b, ev.mask, opt.shards);
  const double e_prox = frozen ? frozen->ess_proximal : ess(r_prox, ev.mask, opt.shards);
  const double e_mix = std::min(e_b, e_prox);
  std::vector<double> weights(n_rec, 0.0);
  if (frozen) {
    if (frozen->cap_weights.size() != n_rec) throw Error("frozen weights do not match batch");
    weights = frozen->cap_weights;
  } else {
    for (std::size_t i = 0; i < n_rec; ++i)
      if (ev.mask[i]) weights[i] = std::min(r_b[i], e_mix);
  }

  const double n = static_cast<double>(batch.mask_count);
  const double kl_coef = 1.0 - e_mix;
  const bool has_mixture = (1.0 - e_b) + (1.0 - e_prox) > 0.0;
  auto part = detail::reduce_valid(batch, params.size(), opt.shards, [&](std::size_t i, detail::Partial& p) {
    const auto& r = batch.records[i];
    p.loss -= weights[i] * ev.logp[i] * r.advantage / n;
    detail::add_score(p.grad, ev.vocab, r.context_id, ev.row(i), r.token_id, -weights[i] * r.advantage / n);
    if (kl_coef != 0.0 && has_mixture) {
      std::vector<double> lprox(ev.vocab);
      log_softmax(prox_snapshot.params().row(r.context_id), 1.0, lprox);
      const auto mix = mixture_logdist(batch.behavior_row(i), lprox, e_b, e_prox);
      const ValueGrad kl = kl_from_logdists(ev.row(i), *mix);
      p.loss += kl_coef * kl.value / n;
      detail::add_row(p.grad, ev.vocab, r.context_id, kl.grad, kl_coef / n);
    }
    detail::add_common(batch, ev, i, p);
  });
  ObjectiveOutput out = detail::finish(std::move(part), batch, e_mix);
  out.frozen.ess_behavior = e_b;
  out.frozen.ess_proximal = e_prox;
  out.frozen.cap_weights = std::move(weights);
  return out;
}

// ---------------------------------------------------------------------------
// Auxiliary terms, added under the same batch-token average.

struct TermOutput {
  double loss = 0.0;
  std::vector<double> grad;
  double mean = 0.0;  // unscaled masked mean (KL or entropy)
};

/// eta * <KL(pi(.|c) || pi_ref(.|c))>_M.
inline TermOutput reference_kl_term(const FlatBatch& batch, const PolicyParams& params, const PolicySnapshot& ref,
                                    double eta, EvalOptions opt = {}) {
  if (!(eta >= 0.0)) throw Error("eta must be nonnegative");
  if (!ref.params().same_shape(params)) throw Error("policies differ in shape");
  const detail::BatchEval ev(batch, params);
  const double n = static_cast<double>(batch.mask_count);
  auto part = detail::reduce_valid(batch, params.size(), opt.shards, [&](std::size_t i, detail::Partial& p) {
    const auto& r = batch.records[i];
    std::vector<double> lq(ev.vocab);
    log_softmax(ref.params().row(r.context_id), 1.0, lq);
    const ValueGrad kl = kl_from_logdists(ev.row(i), lq);
    p.kl_reference += kl.value;
    detail::add_row(p.grad, ev.vocab, r.context_id, kl.grad, eta / n);
  });
  TermOutput out;
  out.mean = part.kl_reference / n;
  out.loss = eta * out.mean;
  out.grad = std::move(part.grad);
  return out;
}

/// -beta_ent * <H(pi(.|c))>_M.
inline TermOutput entropy_term(const FlatBatch& batch, const PolicyParams& params, double beta_ent,
                               EvalOptions opt = {}) {
  if (!(beta_ent >= 0.0)) throw Error("beta_ent must be nonnegative");
  const detail::BatchEval ev(batch, params);
  const double n = static_cast<double>(batch.mask_count);
  auto part = detail::reduce_valid(batch, params.size(), opt.shards, [&](std::size_t i, detail::Partial& p) {
    const auto& r = batch.records[i];
    const ValueGrad h = entropy_from_logdist(ev.row(i));
    p.entropy += h.value;
    detail::add_row(p.grad, ev.vocab, r.context_id, h.grad, -beta_ent / n);
  });
  TermOutput out;
  out.mean = part.entropy / n;
  out.loss = -beta_ent * out.mean;
  out.grad = std::move(part.grad);
  return out;
}

// ---------------------------------------------------------------------------
// Dispatch.

struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::p3o;
  ClipOptions clip;
  P3OOptions p3o;
};

struct ObjectiveExtras {
  const PolicySnapshot* proximal = nullptr;
  const PolicySnapshot* reference = nullptr;
  double eta = 0.0;
  double beta_ent = 0.0;
};

/// Base objective plus reference-KL and entropy terms.
inline ObjectiveOutput evaluate_objective(const ObjectiveSpec& spec, const FlatBatch& batch,
                                          const PolicyParams& params, const ObjectiveExtras& extras = {},
                                          EvalOptions opt = {}) {
  ObjectiveOutput out;
  switch (spec.kind) {
    case ObjectiveKind::reinforce: out = reinforce_loss(batch, params, opt); break;
    case ObjectiveKind::grpo:
    case ObjectiveKind::dapo: out = clip_surrogate_loss(batch, params, spec.clip, opt); break;
    case ObjectiveKind::gspo: out = gspo_loss(batch, params, spec.clip, opt); break;
    case ObjectiveKind::decoupled: out = decoupled_loss(batch, params, spec.clip, opt); break;
    case ObjectiveKind::p3o: out = p3o_loss(batch, params, spec.p3o, opt, extras.proximal); break;
    case ObjectiveKind::two_anchor:
      if (extras.proximal == nullptr) throw Error("missing proximal snapshot");
      out = two_anchor_loss(batch, params, *extras.proximal, opt);
      break;
  }
  if (extras.reference != nullptr) {
    const TermOutput kl = reference_kl_term(batch, params, *extras.reference, extras.eta, opt);
    out.diagnostics.mean_kl_reference = kl.mean;
    if (extras.eta != 0.0) {
      out.loss += kl.loss;
      for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += kl.grad[k];
    }
  }
  if (extras.beta_ent != 0.0) {
    const TermOutput h = entropy_term(batch, params, extras.beta_ent, opt);
    out.loss += h.loss;
    for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += h.grad[k];
  }
  return out;
}

}  // namespace esslab
