// Copyright 2026 The esslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic prompt generators with binary exact-match verifiers.
//
// Token layout for vocabulary size V: payload symbols are 0 .. V-3, the
// separator is V-2 and end-of-sequence is V-1. A prompt is the payload
// followed by the separator.

#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "esslab/core.hpp"
#include "esslab/error.hpp"
#include "esslab/rng.hpp"

namespace esslab {

enum class TaskKind { copy, reverse, mod_sum };

inline std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::mod_sum: return "mod_sum";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "reverse") return TaskKind::reverse;
  if (s == "mod_sum") return TaskKind::mod_sum;
  throw Error("unknown task kind '" + std::string(s) + "'");
}

struct TaskSpec {
  TaskKind kind = TaskKind::copy;
  std::size_t vocab_size = 8;
  std::size_t min_len = 2;
  std::size_t max_len = 3;

  Token eos() const { return static_cast<Token>(vocab_size - 1); }
  Token separator() const { return static_cast<Token>(vocab_size - 2); }
  std::size_t payload_symbols() const { return vocab_size - 2; }

  /// Longest target, eos included.
  std::size_t max_target_len() const { return kind == TaskKind::mod_sum ? 2 : max_len + 1; }

  void validate() const {
    if (vocab_size < 3) throw Error("task.vocab_size must be at least 3");
    if (min_len < 1) throw Error("task.min_len must be at least 1");
    if (max_len < min_len) throw Error("task.max_len must be >= task.min_len");
  }
};

struct TaskInstance {
  TokenSeq prompt;
  TokenSeq target;
};

/// Target for an explicit payload; make_prompt draws the payload.
inline TaskInstance make_instance(const TaskSpec& task, const TokenSeq& payload) {
  TaskInstance inst;
  inst.prompt = payload;
  inst.prompt.push_back(task.separator());
  switch (task.kind) {
    case TaskKind::copy:
      inst.target = payload;
      break;
    case TaskKind::reverse:
      inst.target.assign(payload.rbegin(), payload.rend());
      break;
    case TaskKind::mod_sum: {
      const long long sum = std::accumulate(payload.begin(), payload.end(), 0LL);
      inst.target = {static_cast<Token>(sum % static_cast<long long>(task.payload_symbols()))};
      break;
    }
  }
  inst.target.push_back(task.eos());
  return inst;
}

inline TaskInstance make_prompt(const TaskSpec& task, Rng& rng) {
  task.validate();
  const std::size_t len = task.min_len + rng.below(task.max_len - task.min_len + 1);
  TokenSeq payload(len);
  for (Token& t : payload) t = static_cast<Token>(rng.below(task.payload_symbols()));
  return make_instance(task, payload);
}

/// 1 iff the completion equals the target exactly, eos included.
inline double score_completion(const TaskSpec& /*task*/, const TokenSeq& /*prompt*/, const TokenSeq& target,
                               const TokenSeq& completion) {
  return completion == target ? 1.0 : 0.0;
}

}  // namespace esslab
