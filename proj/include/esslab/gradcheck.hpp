// Copyright 2026 The esslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient oracle and randomized objective checks.
//
// Probes hold every stop-gradient quantity (ESS values, cap weights) at the
// value it had at the base point, so the oracle differentiates the same
// function the analytic gradient describes. Instances with a ratio within
// kink_margin of a clip bound or of the ESS cap are redrawn.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "esslab/core.hpp"
#include "esslab/error.hpp"
#include "esslab/objectives.hpp"
#include "esslab/policy.hpp"
#include "esslab/rng.hpp"

namespace esslab {

/// (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of x.
inline std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& loss_fn,
                                            std::vector<double> x, double h) {
  if (!(h > 0.0) || !std::isfinite(h)) throw Error("h must be positive");
  std::vector<double> g(x.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double up = loss_fn(x);
    x[i] = x0 - h;
    const double down = loss_fn(x);
    x[i] = x0;
    if (!std::isfinite(up) || !std::isfinite(down)) throw Error("non-finite loss at probe " + std::to_string(i));
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline std::vector<double> finite_diff_grad(const std::function<double(const PolicyParams&)>& loss_fn,
                                            const PolicyParams& params, double h) {
  PolicyParams probe = params;
  return finite_diff_grad(
      [&](const std::vector<double>& x) {
        probe.logits() = x;
        return loss_fn(probe);
      },
      params.logits(), h);
}

struct GradCheckOptions {
  double tolerance = 1e-5;
  std::size_t trials = 20;
  double h = 1e-5;
  double kink_margin = 1e-3;
  // Relative error is |a - f| / max(|a|, |f|, floor).
  double denominator_floor = 1e-8;
  // Doubles the largest analytic coordinate of the first trial (self-test of the oracle).
  bool inject_fault = false;
  std::size_t max_attempts = 2000;
};

struct GradCheckReport {
  ObjectiveKind kind = ObjectiveKind::reinforce;
  double max_rel_error = 0.0;
  std::size_t worst_context = 0;
  std::size_t worst_token = 0;
  std::size_t worst_trial = 0;
  std::size_t num_checked = 0;
  std::size_t trials = 0;
  std::size_t redrawn = 0;  // instances rejected by the kink margin
  double tolerance = 0.0;
  bool pass = false;
};

inline void print_report(std::ostream& os, const GradCheckReport& r) {
  os << to_string(r.kind) << ": " << (r.pass ? "PASS" : "FAIL") << " max_rel_error=" << r.max_rel_error
     << " tol=" << r.tolerance << " worst=(context " << r.worst_context << ", token " << r.worst_token << ", trial "
     << r.worst_trial << ") checked=" << r.num_checked << " trials=" << r.trials << " redrawn=" << r.redrawn
     << '\n';
}

/// A small random problem: batch, parameters and every snapshot an objective may read.
struct GradCheckInstance {
  PolicyParams params;
  FlatBatch batch;
  std::optional<PolicySnapshot> proximal;
  std::optional<PolicySnapshot> reference;
  ObjectiveSpec spec;
  double eta = 0.0;
  double beta_ent = 0.0;

  ObjectiveExtras extras() const {
    return {proximal ? &*proximal : nullptr, reference ? &*reference : nullptr, eta, beta_ent};
  }
};

namespace detail {

inline PolicyParams perturbed(const PolicyParams& base, double scale, Rng& rng) {
  PolicyParams p = base;
  for (double& z : p.logits()) z += scale * rng.normal();
  return p;
}

/// V <= 5, m <= 2, at most 30 records over a handful of sequences.
inline GradCheckInstance random_instance(ObjectiveKind kind, Rng& rng) {
  GradCheckInstance inst;
  const std::size_t vocab = 2 + rng.below(4);
  const std::size_t order = 1 + rng.below(2);
  inst.params = PolicyParams(vocab, order);
  for (double& z : inst.params.logits()) z = rng.normal();

  const double drift = rng.uniform(0.05, 0.6);
  const PolicyParams behavior = perturbed(inst.params, drift, rng);
  const double temperature = rng.uniform(0.7, 1.3);
  inst.proximal.emplace(perturbed(inst.params, rng.uniform(0.05, 0.4), rng), 0);
  inst.reference.emplace(perturbed(inst.params, 1.0, rng), 0);

  // Reuse a few contexts so rows collect several tokens.
  const std::size_t pool = std::min<std::size_t>(inst.params.num_contexts(), 2 + rng.below(5));
  std::vector<std::uint32_t> contexts(pool);
  for (auto& c : contexts) c = static_cast<std::uint32_t>(rng.below(inst.params.num_contexts()));

  const std::size_t num_seq = 2 + rng.below(5);
  const std::size_t budget = 30;
  FlatBatch& batch = inst.batch;
  batch.vocab_size = vocab;
  std::vector<double> row(vocab);
  for (std::size_t s = 0; s < num_seq && batch.records.size() < budget; ++s) {
    const double adv = rng.normal();
    const std::size_t len = std::min<std::size_t>(1 + rng.below(6), budget - batch.records.size());
    for (std::size_t t = 0; t < len; ++t) {
      TokenRecord r;
      r.context_id = contexts[rng.below(pool)];
      r.token_id = static_cast<Token>(rng.below(vocab));
      r.sequence = static_cast<std::uint32_t>(s);
      r.advantage = adv;
      r.valid = rng.bernoulli(0.8);
      log_softmax(behavior.row(r.context_id), temperature, row);
      r.logp_behavior = row[static_cast<std::size_t>(r.token_id)];
      batch.behavior_logdist.insert(batch.behavior_logdist.end(), row.begin(), row.end());
      r.logp_current = log_prob(inst.params, r.context_id, r.token_id);
      r.logp_proximal = log_prob(inst.proximal->params(), r.context_id, r.token_id);
      batch.records.push_back(r);
    }
  }
  batch.records.front().valid = true;
  batch.num_sequences = batch.records.back().sequence + 1;
  batch.recount();

  ObjectiveSpec& spec = inst.spec;
  spec.kind = kind;
  spec.clip.eps_low = rng.uniform(0.1, 0.4);
  spec.clip.eps_high = kind == ObjectiveKind::dapo ? rng.uniform(0.2, 0.5) : spec.clip.eps_low;
  spec.clip.eps_seq = rng.uniform(0.05, 0.3);
  spec.clip.c_w = rng.uniform(1.0, 3.0);
  spec.p3o.axis = rng.bernoulli(0.5) ? RatioAxis::behavior : RatioAxis::proximal;
  inst.eta = rng.bernoulli(0.5) ? rng.uniform(0.0, 0.5) : 0.0;
  inst.beta_ent = rng.bernoulli(0.5) ? rng.uniform(0.0, 0.1) : 0.0;
  return inst;
}

inline bool near(double x, double kink, double margin) { return std::abs(x - kink) < margin; }

/// True when some valid ratio sits within `margin` of a non-differentiable point.
inline bool near_kink(const GradCheckInstance& inst, const ObjectiveOutput& base, double margin) {
  const FlatBatch& b = inst.batch;
  const ClipOptions& clip = inst.spec.clip;
  std::vector<double> logp(b.records.size());
  for (std::size_t i = 0; i < b.records.size(); ++i)
    logp[i] = log_prob(inst.params, b.records[i].context_id, b.records[i].token_id);

  switch (inst.spec.kind) {
    case ObjectiveKind::reinforce: return false;
    case ObjectiveKind::grpo:
    case ObjectiveKind::dapo:
    case ObjectiveKind::decoupled:
      for (std::size_t i = 0; i < b.records.size(); ++i) {
        const auto& r = b.records[i];
        if (!r.valid) continue;
        const double anchor = inst.spec.kind == ObjectiveKind::decoupled ? *r.logp_proximal : r.logp_behavior;
        const double rho = std::exp(logp[i] - anchor);
        if (near(rho, 1.0 - clip.eps_low, margin) || near(rho, 1.0 + clip.eps_high, margin)) return true;
      }
      return false;
    case ObjectiveKind::gspo: {
      std::vector<double> sum(b.num_sequences, 0.0);
      std::vector<std::size_t> len(b.num_sequences, 0);
      for (std::size_t i = 0; i < b.records.size(); ++i) {
        const auto& r = b.records[i];
        if (!r.valid) continue;
        sum[r.sequence] += logp[i] - r.logp_behavior;
        ++len[r.sequence];
      }
      for (std::size_t s = 0; s < sum.size(); ++s) {
        if (len[s] == 0) continue;
        const double ratio = std::exp(sum[s] / static_cast<double>(len[s]));
        if (near(ratio, 1.0 - clip.eps_seq, margin) || near(ratio, 1.0 + clip.eps_seq, margin)) return true;
      }
      return false;
    }
    case ObjectiveKind::p3o:
    case ObjectiveKind::two_anchor: {
      const bool proximal_axis =
          inst.spec.kind == ObjectiveKind::p3o && inst.spec.p3o.axis == RatioAxis::proximal;
      const double cap = inst.spec.kind == ObjectiveKind::p3o
                             ? base.frozen.ess_behavior
                             : std::min(base.frozen.ess_behavior, base.frozen.ess_proximal);
      for (std::size_t i = 0; i < b.records.size(); ++i) {
        const auto& r = b.records[i];
        if (!r.valid) continue;
        const double rho = std::exp(logp[i] - (proximal_axis ? *r.logp_proximal : r.logp_behavior));
        if (near(rho, cap, margin)) return true;
      }
      return false;
    }
  }
  return false;
}

}  // namespace detail

/// Analytic gradient of one instance against the central-difference oracle,
/// folded into `report`.
inline void check_instance(const GradCheckInstance& inst, const ObjectiveOutput& base, const GradCheckOptions& opt,
                           std::size_t trial, bool corrupt, GradCheckReport& report) {
  EvalOptions frozen;
  frozen.frozen = &base.frozen;
  const ObjectiveExtras extras = inst.extras();
  const auto loss_fn = [&](const PolicyParams& p) {
    return evaluate_objective(inst.spec, inst.batch, p, extras, frozen).loss;
  };
  const std::vector<double> oracle = finite_diff_grad(loss_fn, inst.params, opt.h);
  std::vector<double> analytic = base.grad;
  if (corrupt) {
    std::size_t k = 0;
    for (std::size_t i = 1; i < analytic.size(); ++i)
      if (std::abs(analytic[i]) > std::abs(analytic[k])) k = i;
    analytic[k] *= 2.0;
  }
  const std::size_t vocab = inst.params.vocab_size();
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(oracle[i]), opt.denominator_floor});
    double err = std::abs(analytic[i] - oracle[i]) / denom;
    if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
    ++report.num_checked;
    if (report.num_checked == 1 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_context = i / vocab;
      report.worst_token = i % vocab;
      report.worst_trial = trial;
    }
  }
}

/// Runs `opt.trials` kink-free random instances of `kind`. Deterministic per seed.
inline GradCheckReport check_objective_gradient(ObjectiveKind kind, std::uint64_t seed,
                                                const GradCheckOptions& opt = {}) {
  if (!(opt.tolerance > 0.0)) throw Error("tolerance must be positive");
  if (opt.trials < 1) throw Error("trials must be at least 1");
  GradCheckReport report;
  report.kind = kind;
  report.tolerance = opt.tolerance;
  std::size_t attempt = 0;
  while (report.trials < opt.trials) {
    if (attempt >= opt.max_attempts) throw Error("could not draw a kink-free instance");
    Rng rng(seed, stream_id({static_cast<std::uint64_t>(kind), attempt++}));
    const GradCheckInstance inst = detail::random_instance(kind, rng);
    const ObjectiveOutput base = evaluate_objective(inst.spec, inst.batch, inst.params, inst.extras());
    if (detail::near_kink(inst, base, opt.kink_margin)) {
      ++report.redrawn;
      continue;
    }
    check_instance(inst, base, opt, report.trials, opt.inject_fault && report.trials == 0, report);
    ++report.trials;
  }
  report.pass = report.max_rel_error < opt.tolerance;
  return report;
}

}  // namespace esslab
