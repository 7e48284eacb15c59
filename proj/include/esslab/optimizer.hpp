// Copyright 2026 The esslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay, global-norm gradient clipping and a
// linear-warmup / cosine-decay learning-rate schedule.

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "esslab/error.hpp"

namespace esslab {

struct OptimizerConfig {
  double lr = 0.1;  // peak learning rate
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  double warmup_ratio = 0.1;
  std::size_t total_steps = 0;  // 0: derived from the run length

  void validate() const {
    if (!(lr >= 0.0)) throw Error("train.lr must be nonnegative");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw Error("train.beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw Error("train.beta2 must be in [0, 1)");
    if (!(eps > 0.0)) throw Error("train.adam_eps must be positive");
    if (!(weight_decay >= 0.0)) throw Error("train.weight_decay must be nonnegative");
    if (std::isnan(grad_clip_norm)) throw Error("train.grad_clip_norm must be a number");
    if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) throw Error("train.warmup_ratio must be in [0, 1]");
  }
};

/// Learning rate applied by the `step`-th update (1-based; step 0 gives 0).
///
///   warmup W = round(warmup_ratio * total):
///     lr(s) = peak * s / W                                   for s <= W
///     lr(s) = peak * (1 + cos(pi * (s - W) / (total - W))) / 2 for W < s <= total
///     lr(s) = 0                                              for s > total
inline double warmup_cosine_lr(std::size_t step, double peak, double warmup_ratio, std::size_t total) {
  if (total == 0) return peak;
  const auto warmup = static_cast<std::size_t>(std::llround(warmup_ratio * static_cast<double>(total)));
  if (step > total) return 0.0;
  if (warmup > 0 && step <= warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == warmup) return peak;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double l2_norm(std::span<const double> g) {
  double s = 0.0;
  for (double x : g) s += x * x;
  return std::sqrt(s);
}

/// Rescales g to norm max_norm if it is larger. Returns the norm before clipping.
inline double clip_grad_norm(std::span<double> g, double max_norm) {
  const double norm = l2_norm(g);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (double& x : g) x *= scale;
  }
  return norm;
}

struct OptimizerState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::size_t step = 0;

  explicit OptimizerState(std::size_t n = 0) : first_moment(n, 0.0), second_moment(n, 0.0) {}
};

/// One AdamW update at learning rate lr; bias-corrected moments.
inline void adamw_step(std::span<double> params, std::span<const double> grad, OptimizerState& state,
                       const OptimizerConfig& cfg, double lr) {
  if (params.size() != grad.size() || state.first_moment.size() != params.size())
    throw Error("optimizer shape mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    double& m = state.first_moment[k];
    double& v = state.second_moment[k];
    const double g = grad[k];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    if (cfg.weight_decay != 0.0) params[k] *= decay;
    if (m != 0.0) params[k] -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
  }
}

}  // namespace esslab
