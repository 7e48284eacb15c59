// Copyright 2026 The esslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Rollout and batch data model shared by every objective.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iterator>
#include <limits>
#include <optional>
#include <ranges>
#include <span>
#include <vector>

#include "esslab/error.hpp"

namespace esslab {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

/// One sampled response token and everything an objective needs about it.
struct TokenRecord {
  std::uint32_t context_id = 0;
  Token token_id = 0;
  double logp_current = 0.0;   // nats, T = 1, under the parameters being trained
  double logp_behavior = 0.0;  // nats, under the (possibly tempered/quantized) sampler
  std::optional<double> logp_proximal;
  double advantage = 0.0;  // constant across one completion
  bool valid = true;
  std::uint32_t sequence = 0;  // owning completion; assigned by flatten_groups
};

/// Which sampler produced a completion. All fields neutral means on-policy.
struct BehaviorTag {
  std::size_t staleness = 0;
  double temperature = 1.0;
  double quantize_step = 0.0;
  bool alternate = false;

  bool on_policy() const {
    return staleness == 0 && temperature == 1.0 && quantize_step == 0.0 && !alternate;
  }
};

struct SequenceRollout {
  TokenSeq prompt;
  TokenSeq completion;
  double reward = 0.0;
  std::vector<TokenRecord> records;
  /// Full sampler log-distribution at every position, records.size() x V row-major.
  std::vector<double> behavior_logdist;
  BehaviorTag behavior;
};

struct RolloutGroup {
  TokenSeq prompt;
  std::vector<SequenceRollout> members;

  std::size_t group_size() const { return members.size(); }
};

/// Flattened training batch. Padding is never materialized; validity is a per-record bit.
struct FlatBatch {
  std::size_t vocab_size = 0;  // 0 when no behavior distributions are attached
  std::vector<TokenRecord> records;
  std::vector<double> behavior_logdist;
  std::size_t mask_count = 0;
  std::size_t num_sequences = 0;

  bool has_behavior_dists() const {
    return vocab_size > 0 && behavior_logdist.size() == records.size() * vocab_size;
  }
  std::span<const double> behavior_row(std::size_t i) const {
    return {behavior_logdist.data() + i * vocab_size, vocab_size};
  }

  /// Recounts valid bits; call after editing masks by hand.
  void recount() {
    mask_count = static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [](const TokenRecord& r) { return r.valid; }));
  }
};

namespace detail {
inline bool finite_record(const TokenRecord& r) {
  return std::isfinite(r.logp_current) && std::isfinite(r.logp_behavior) &&
         (!r.logp_proximal || std::isfinite(*r.logp_proximal)) && std::isfinite(r.advantage);
}
}  // namespace detail

/// Flattens groups in (group, member, position) order.
inline FlatBatch flatten_groups(std::span<const RolloutGroup> groups) {
  if (groups.empty()) throw Error("empty batch");
  FlatBatch batch;
  std::size_t with_dists = 0;
  std::size_t members = 0;
  for (const auto& g : groups) {
    if (g.members.empty()) throw Error("empty batch");
    for (const auto& m : g.members) {
      ++members;
      if (m.records.empty() || m.records.size() != m.completion.size()) throw Error("corrupt record");
      if (!m.behavior_logdist.empty()) {
        if (m.behavior_logdist.size() % m.records.size() != 0) throw Error("corrupt record");
        const std::size_t v = m.behavior_logdist.size() / m.records.size();
        if (batch.vocab_size != 0 && batch.vocab_size != v) throw Error("corrupt record");
        batch.vocab_size = v;
        ++with_dists;
      }
    }
  }
  if (with_dists != 0 && with_dists != members) throw Error("corrupt record");

  std::uint32_t seq = 0;
  for (const auto& g : groups) {
    for (const auto& m : g.members) {
      for (TokenRecord r : m.records) {
        if (!detail::finite_record(r)) throw Error("corrupt record");
        r.sequence = seq;
        batch.records.push_back(r);
      }
      batch.behavior_logdist.insert(batch.behavior_logdist.end(), m.behavior_logdist.begin(),
                                    m.behavior_logdist.end());
      ++seq;
    }
  }
  batch.num_sequences = seq;
  batch.recount();
  if (batch.mask_count == 0) throw Error("corrupt record");
  return batch;
}

inline FlatBatch flatten_groups(const std::vector<RolloutGroup>& groups) {
  return flatten_groups(std::span<const RolloutGroup>(groups));
}

/// Mean of the entries whose mask bit is set.
template <std::ranges::input_range Values, std::ranges::input_range Mask>
double masked_mean(const Values& values, const Mask& mask) {
  auto v = std::ranges::begin(values);
  auto m = std::ranges::begin(mask);
  double sum = 0.0;
  std::size_t count = 0;
  for (; v != std::ranges::end(values) && m != std::ranges::end(mask); ++v, ++m) {
    if (*m) {
      sum += static_cast<double>(*v);
      ++count;
    }
  }
  if (v != std::ranges::end(values) || m != std::ranges::end(mask)) throw Error("length mismatch");
  if (count == 0) throw Error("empty mask");
  return sum / static_cast<double>(count);
}

struct BatchReport {
  double min_ratio = 0.0;
  double max_ratio = 0.0;
  std::size_t non_finite = 0;
  std::size_t violations = 0;  // sequences whose tokens disagree on the advantage
  std::size_t valid_tokens = 0;
};

/// Report-only health check; ratios are current vs behavior over valid tokens.
inline BatchReport validate_batch(const FlatBatch& batch) {
  BatchReport report;
  report.min_ratio = std::numeric_limits<double>::infinity();
  report.max_ratio = -std::numeric_limits<double>::infinity();
  std::vector<std::optional<double>> seq_adv;
  std::vector<bool> seq_bad;
  for (const auto& r : batch.records) {
    if (r.sequence >= seq_adv.size()) {
      seq_adv.resize(r.sequence + 1);
      seq_bad.resize(r.sequence + 1, false);
    }
    if (!seq_adv[r.sequence]) {
      seq_adv[r.sequence] = r.advantage;
    } else if (*seq_adv[r.sequence] != r.advantage && !seq_bad[r.sequence]) {
      seq_bad[r.sequence] = true;
      ++report.violations;
    }
    if (!r.valid) continue;
    ++report.valid_tokens;
    for (double x : {r.logp_current, r.logp_behavior, r.advantage})
      if (!std::isfinite(x)) ++report.non_finite;
    if (r.logp_proximal && !std::isfinite(*r.logp_proximal)) ++report.non_finite;
    const double rho = std::exp(r.logp_current - r.logp_behavior);
    if (std::isfinite(rho)) {
      report.min_ratio = std::min(report.min_ratio, rho);
      report.max_ratio = std::max(report.max_ratio, rho);
    }
  }
  return report;
}

}  // namespace esslab
