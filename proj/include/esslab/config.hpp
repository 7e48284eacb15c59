// Copyright 2026 The esslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Text configuration for runs and suites.
//
// One `key = value` pair per line; `#` starts a comment. Keys are listed in
// README.md. Unknown or repeated keys are rejected, and every error names the
// offending key.

#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "esslab/error.hpp"
#include "esslab/objectives.hpp"
#include "esslab/policy.hpp"
#include "esslab/tasks.hpp"
#include "esslab/trainer.hpp"

namespace esslab {

inline constexpr int kConfigVersion = 1;

enum class SuiteKind { clip_sweep, temperature, quantization, staleness, mixing, two_anchor_compare };

inline std::string_view to_string(SuiteKind k) {
  switch (k) {
    case SuiteKind::clip_sweep: return "clip_sweep";
    case SuiteKind::temperature: return "temperature";
    case SuiteKind::quantization: return "quantization";
    case SuiteKind::staleness: return "staleness";
    case SuiteKind::mixing: return "mixing";
    case SuiteKind::two_anchor_compare: return "two_anchor_compare";
  }
  return "?";
}

/// Where the mixing regime's alternate sampler comes from.
struct AlternateSource {
  enum class Kind { none, initial, uniform, file } kind = Kind::none;
  std::filesystem::path path;
};

struct SuiteOptions {
  SuiteKind kind = SuiteKind::clip_sweep;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<ObjectiveKind> objectives;  // empty: per-kind default
  std::vector<double> clips{0.2, 0.4, 0.6};
  std::vector<double> temperatures{0.6, 1.2};
  std::vector<double> quantize_steps{6.0};
  std::vector<std::size_t> staleness{0, 2, 4, 8};
  std::vector<double> mix_fractions{0.5};
};

struct ExperimentConfig {
  TrainConfig train;
  RegimeConfig regime;
  AlternateSource alternate;
  bool has_clip_range = false;
  std::set<std::string> keys;  // keys present in the file
  std::optional<SuiteOptions> suite;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline Error key_error(const std::string& key, const std::string& what) { return Error(key + ": " + what); }

template <class T>
T parse_integer(const std::string& key, std::string_view v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size())
    throw key_error(key, "expected a nonnegative integer, got '" + std::string(v) + "'");
  return out;
}

inline double parse_real(const std::string& key, std::string_view v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out))
    throw key_error(key, "expected a real number, got '" + std::string(v) + "'");
  return out;
}

template <class Fn>
auto parse_list(const std::string& key, std::string_view v, Fn&& item) {
  std::vector<decltype(item(key, v))> out;
  std::size_t pos = 0;
  while (pos <= v.size()) {
    const auto comma = v.find(',', pos);
    const auto part = trim(v.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (part.empty()) throw key_error(key, "empty list item");
    out.push_back(item(key, part));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

inline SuiteKind parse_suite_kind(const std::string& key, std::string_view v) {
  for (SuiteKind k : {SuiteKind::clip_sweep, SuiteKind::temperature, SuiteKind::quantization,
                      SuiteKind::staleness, SuiteKind::mixing, SuiteKind::two_anchor_compare})
    if (to_string(k) == v) return k;
  throw key_error(key, "unknown suite kind '" + std::string(v) + "'");
}

template <class Fn>
auto rethrow_with_key(const std::string& key, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw key_error(key, e.what());
  }
}

inline void apply(ExperimentConfig& c, const std::string& key, std::string_view v, const std::filesystem::path& base) {
  TrainConfig& t = c.train;
  RegimeConfig& r = c.regime;
  auto real = [&] { return parse_real(key, v); };
  auto count = [&] { return parse_integer<std::size_t>(key, v); };
  auto reals = [&] { return parse_list(key, v, [](const std::string& k, std::string_view s) { return parse_real(k, s); }); };

  if (key == "config.version") {
    if (parse_integer<int>(key, v) != kConfigVersion) throw key_error(key, "unsupported version");
  } else if (key == "task.kind") {
    t.task.kind = rethrow_with_key(key, [&] { return parse_task_kind(v); });
  } else if (key == "task.vocab_size") {
    t.task.vocab_size = count();
  } else if (key == "task.min_len") {
    t.task.min_len = count();
  } else if (key == "task.max_len") {
    t.task.max_len = count();
  } else if (key == "policy.context_order") {
    t.context_order = count();
  } else if (key == "init.kind") {
    if (v == "uniform") t.init.kind = InitConfig::Kind::uniform;
    else if (v == "sft") t.init.kind = InitConfig::Kind::sft;
    else throw key_error(key, "expected 'uniform' or 'sft'");
  } else if (key == "init.sft_demos") {
    t.init.sft_demos = count();
  } else if (key == "init.sft_lr") {
    t.init.sft_lr = real();
  } else if (key == "train.objective") {
    t.objective.kind = rethrow_with_key(key, [&] { return parse_objective_kind(v); });
  } else if (key == "train.p3o_axis") {
    if (v == "behavior") t.objective.p3o.axis = RatioAxis::behavior;
    else if (v == "proximal") t.objective.p3o.axis = RatioAxis::proximal;
    else throw key_error(key, "expected 'behavior' or 'proximal'");
  } else if (key == "train.group_size") {
    t.group_size = count();
  } else if (key == "train.prompts_per_iter") {
    t.prompts_per_iter = count();
  } else if (key == "train.max_tokens") {
    t.max_tokens = count();
  } else if (key == "train.seed") {
    t.seed = parse_integer<std::uint64_t>(key, v);
  } else if (key == "train.iterations") {
    t.iterations = count();
  } else if (key == "train.shards") {
    t.shards = count();
  } else if (key == "train.lr") {
    t.optimizer.lr = real();
  } else if (key == "train.beta1") {
    t.optimizer.beta1 = real();
  } else if (key == "train.beta2") {
    t.optimizer.beta2 = real();
  } else if (key == "train.adam_eps") {
    t.optimizer.eps = real();
  } else if (key == "train.weight_decay") {
    t.optimizer.weight_decay = real();
  } else if (key == "train.grad_clip_norm") {
    t.optimizer.grad_clip_norm = real();
  } else if (key == "train.warmup_ratio") {
    t.optimizer.warmup_ratio = real();
  } else if (key == "train.total_steps") {
    t.optimizer.total_steps = count();
  } else if (key == "train.beta_ent") {
    t.beta_ent = real();
  } else if (key == "train.eta") {
    t.eta = real();
  } else if (key == "train.adv_eps") {
    t.advantage.eps_std = real();
  } else if (key == "clip.eps") {
    t.objective.clip.eps_low = t.objective.clip.eps_high = t.objective.clip.eps_seq = real();
    c.has_clip_range = true;
  } else if (key == "clip.eps_low") {
    t.objective.clip.eps_low = real();
    c.has_clip_range = true;
  } else if (key == "clip.eps_high") {
    t.objective.clip.eps_high = real();
    c.has_clip_range = true;
  } else if (key == "clip.eps_seq") {
    t.objective.clip.eps_seq = real();
    c.has_clip_range = true;
  } else if (key == "clip.c_w") {
    t.objective.clip.c_w = real();
  } else if (key == "regime.staleness") {
    r.staleness = count();
  } else if (key == "regime.rollout_temperature") {
    r.rollout_temperature = real();
  } else if (key == "regime.quantize_step") {
    r.quantize_step = real();
  } else if (key == "regime.mix_fraction") {
    r.mix_fraction = real();
  } else if (key == "regime.epochs_per_rollout") {
    r.epochs_per_rollout = count();
  } else if (key == "regime.alternate") {
    if (v == "initial") c.alternate.kind = AlternateSource::Kind::initial;
    else if (v == "uniform") c.alternate.kind = AlternateSource::Kind::uniform;
    else {
      c.alternate.kind = AlternateSource::Kind::file;
      c.alternate.path = base / std::filesystem::path(std::string(v));
    }
  } else if (key.starts_with("suite.")) {
    if (!c.suite) c.suite.emplace();
    SuiteOptions& s = *c.suite;
    if (key == "suite.kind") {
      s.kind = parse_suite_kind(key, v);
    } else if (key == "suite.seeds") {
      s.seeds = parse_list(key, v, [](const std::string& k, std::string_view x) { return parse_integer<std::uint64_t>(k, x); });
    } else if (key == "suite.objectives") {
      s.objectives = parse_list(key, v, [](const std::string& k, std::string_view x) {
        return rethrow_with_key(k, [&] { return parse_objective_kind(x); });
      });
    } else if (key == "suite.clips") {
      s.clips = reals();
    } else if (key == "suite.temperatures") {
      s.temperatures = reals();
    } else if (key == "suite.quantize_steps") {
      s.quantize_steps = reals();
    } else if (key == "suite.staleness") {
      s.staleness = parse_list(key, v, [](const std::string& k, std::string_view x) { return parse_integer<std::size_t>(k, x); });
    } else if (key == "suite.mix_fractions") {
      s.mix_fractions = reals();
    } else {
      throw Error("unknown key '" + key + "'");
    }
  } else {
    throw Error("unknown key '" + key + "'");
  }
}

}  // namespace detail

/// Builds a PolicySnapshot for the alternate sampler of one seed's run.
inline std::optional<PolicySnapshot> resolve_alternate(const AlternateSource& src, const TrainConfig& train) {
  switch (src.kind) {
    case AlternateSource::Kind::none: return std::nullopt;
    case AlternateSource::Kind::initial: return PolicySnapshot(initial_policy(train), 0);
    case AlternateSource::Kind::uniform: return PolicySnapshot(PolicyParams(train.task.vocab_size, train.context_order), 0);
    case AlternateSource::Kind::file: {
      std::ifstream in(src.path);
      if (!in) throw Error("regime.alternate: cannot open '" + src.path.string() + "'");
      PolicySnapshot snap = load_policy(in);
      if (snap.params().vocab_size() != train.task.vocab_size || snap.params().context_order() != train.context_order)
        throw Error("regime.alternate: snapshot shape does not match the task and context order");
      return snap;
    }
  }
  return std::nullopt;
}

/// Run-mode checks: fixed-clip objectives need an explicit clip range, P3O takes none.
inline void validate_objective_keys(ObjectiveKind kind, bool has_clip_range) {
  if (uses_clip_range(kind) && !has_clip_range) throw Error("missing clip range for fixed-clip objective");
  if (kind == ObjectiveKind::p3o && has_clip_range) throw Error("clip.*: p3o takes no clip range");
}

/// Range checks shared by run and suite configs. Mixing is checked here rather
/// than in RegimeConfig::validate because the alternate snapshot is built per seed.
inline void validate_config(const ExperimentConfig& c) {
  TrainConfig t = c.train;
  t.validate();
  RegimeConfig r = c.regime;
  if (c.alternate.kind != AlternateSource::Kind::none) r.alternate.emplace(PolicyParams(2, 1), 0);
  try {
    r.validate();
  } catch (const Error& e) {
    const std::string what = e.what();
    if (what.starts_with("regime.")) throw;
    throw Error("regime.rollout_temperature: " + what);
  }
}

inline ExperimentConfig parse_config_text(std::string_view text, const std::filesystem::path& base_dir = {}) {
  ExperimentConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view s = line;
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = detail::trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos)
      throw Error("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key(detail::trim(s.substr(0, eq)));
    const std::string_view value = detail::trim(s.substr(eq + 1));
    if (key.empty()) throw Error("line " + std::to_string(lineno) + ": missing key");
    if (!c.keys.insert(key).second) throw Error(key + ": repeated key");
    detail::apply(c, key, value, base_dir);
  }
  validate_config(c);
  if (!c.suite) validate_objective_keys(c.train.objective.kind, c.has_clip_range);
  return c;
}

inline ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.parent_path());
}

}  // namespace esslab
