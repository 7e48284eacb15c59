// Copyright 2026 The esslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tabular softmax policy over order-m token contexts.
//
// Row r of the logit table parameterizes pi(. | r) = softmax(logits[r]).
// Contexts are the last m tokens of prompt ++ prefix, left-padded with a BOS
// symbol whose id is V, encoded in base (V + 1).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <limits>
#include <memory>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "esslab/core.hpp"
#include "esslab/error.hpp"
#include "esslab/rng.hpp"

namespace esslab {

class PolicyParams {
 public:
  PolicyParams() = default;
  PolicyParams(std::size_t vocab_size, std::size_t context_order)
      : vocab_size_(vocab_size), context_order_(context_order) {
    if (vocab_size < 2) throw Error("vocab_size must be at least 2");
    if (context_order < 1) throw Error("context_order must be at least 1");
    std::size_t rows = 1;
    for (std::size_t i = 0; i < context_order; ++i) {
      if (rows > std::numeric_limits<std::uint32_t>::max() / (vocab_size + 1))
        throw Error("context table too large");
      rows *= vocab_size + 1;
    }
    num_contexts_ = rows;
    logits_.assign(rows * vocab_size, 0.0);
  }

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t context_order() const { return context_order_; }
  std::size_t num_contexts() const { return num_contexts_; }
  std::size_t size() const { return logits_.size(); }
  Token bos() const { return static_cast<Token>(vocab_size_); }

  std::span<double> row(std::size_t context) { return {logits_.data() + context * vocab_size_, vocab_size_}; }
  std::span<const double> row(std::size_t context) const {
    return {logits_.data() + context * vocab_size_, vocab_size_};
  }
  std::vector<double>& logits() { return logits_; }
  const std::vector<double>& logits() const { return logits_; }

  bool same_shape(const PolicyParams& o) const {
    return vocab_size_ == o.vocab_size_ && context_order_ == o.context_order_;
  }

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;

 private:
  std::size_t vocab_size_ = 0;
  std::size_t context_order_ = 0;
  std::size_t num_contexts_ = 0;
  std::vector<double> logits_;
};

/// Immutable deep copy of a parameter table, stamped with the iteration it was taken at.
class PolicySnapshot {
 public:
  PolicySnapshot(const PolicyParams& params, std::int64_t step)
      : params_(std::make_shared<const PolicyParams>(params)), step_(step) {}
  PolicySnapshot(PolicyParams&& params, std::int64_t step)
      : params_(std::make_shared<const PolicyParams>(std::move(params))), step_(step) {}

  const PolicyParams& params() const { return *params_; }
  std::int64_t step() const { return step_; }

 private:
  std::shared_ptr<const PolicyParams> params_;
  std::int64_t step_ = 0;
};

/// FNV-1a over the raw bytes of the table; used to detect aliasing.
inline std::uint64_t fingerprint(const PolicyParams& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
  };
  const std::size_t dims[2] = {p.vocab_size(), p.context_order()};
  feed(dims, sizeof(dims));
  feed(p.logits().data(), p.logits().size() * sizeof(double));
  return h;
}

class ContextEncoder {
 public:
  ContextEncoder(std::size_t vocab_size, std::size_t context_order)
      : vocab_size_(vocab_size), order_(context_order) {}
  explicit ContextEncoder(const PolicyParams& p) : ContextEncoder(p.vocab_size(), p.context_order()) {}

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t order() const { return order_; }
  Token bos() const { return static_cast<Token>(vocab_size_); }

  /// Id of the window formed by the last m tokens of prompt ++ prefix.
  std::uint32_t encode(std::span<const Token> prompt, std::span<const Token> prefix) const {
    const std::size_t total = prompt.size() + prefix.size();
    std::uint64_t id = 0;
    for (std::size_t k = 0; k < order_; ++k) {
      // Position of the k-th window slot in the concatenated sequence.
      const std::size_t need = order_ - k;
      Token t = bos();
      if (need <= total) {
        const std::size_t pos = total - need;
        t = pos < prompt.size() ? prompt[pos] : prefix[pos - prompt.size()];
        check(t);
      }
      id = id * (vocab_size_ + 1) + static_cast<std::uint64_t>(t);
    }
    return static_cast<std::uint32_t>(id);
  }

  /// Id of an explicit window (length m); BOS allowed.
  std::uint32_t encode_window(std::span<const Token> window) const {
    if (window.size() != order_) throw Error("window length must equal context order");
    std::uint64_t id = 0;
    for (Token t : window) {
      if (t != bos()) check(t);
      id = id * (vocab_size_ + 1) + static_cast<std::uint64_t>(t);
    }
    return static_cast<std::uint32_t>(id);
  }

 private:
  void check(Token t) const {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size_) throw Error("token out of range");
  }

  std::size_t vocab_size_;
  std::size_t order_;
};

// ---------------------------------------------------------------------------
// Distributions.

/// log-sum-exp of logits / temperature with max subtraction.
inline double log_normalizer(std::span<const double> logits, double temperature = 1.0) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z / temperature);
  double s = 0.0;
  for (double z : logits) s += std::exp(z / temperature - mx);
  return mx + std::log(s);
}

/// out[j] = z_j / T - logsumexp(z / T).
inline void log_softmax(std::span<const double> logits, double temperature, std::span<double> out) {
  const double lse = log_normalizer(logits, temperature);
  for (std::size_t j = 0; j < logits.size(); ++j) out[j] = logits[j] / temperature - lse;
}

inline void softmax(std::span<const double> logits, double temperature, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z / temperature);
  double s = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out[j] = std::exp(logits[j] / temperature - mx);
    s += out[j];
  }
  for (double& p : out) p /= s;
}

namespace detail {
inline void check_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw Error("temperature must be positive");
}
inline void check_context(const PolicyParams& p, std::size_t context) {
  if (context >= p.num_contexts()) throw Error("context id out of range");
}
inline void check_token(const PolicyParams& p, Token t) {
  if (t < 0 || static_cast<std::size_t>(t) >= p.vocab_size()) throw Error("token out of range");
}
}  // namespace detail

inline std::vector<double> token_dist(const PolicyParams& params, std::size_t context, double temperature = 1.0) {
  detail::check_temperature(temperature);
  detail::check_context(params, context);
  std::vector<double> out(params.vocab_size());
  softmax(params.row(context), temperature, out);
  return out;
}

inline double log_prob(const PolicyParams& params, std::size_t context, Token token, double temperature = 1.0) {
  detail::check_temperature(temperature);
  detail::check_context(params, context);
  detail::check_token(params, token);
  const auto row = params.row(context);
  return row[static_cast<std::size_t>(token)] / temperature - log_normalizer(row, temperature);
}

/// d log pi(token | context) / d logits[context][j] = 1[j = token] - pi(j). Unit temperature.
inline std::vector<double> grad_log_prob(const PolicyParams& params, std::size_t context, Token token) {
  detail::check_context(params, context);
  detail::check_token(params, token);
  std::vector<double> g(params.vocab_size());
  softmax(params.row(context), 1.0, g);
  for (double& x : g) x = -x;
  g[static_cast<std::size_t>(token)] += 1.0;
  return g;
}

struct ValueGrad {
  double value = 0.0;
  std::vector<double> grad;  // over the logits of p's row
};

/// KL(p || q) from log-distributions, with the gradient w.r.t. p's logits:
/// dKL/dz_j = p_j (log p_j - log q_j - KL).
inline ValueGrad kl_from_logdists(std::span<const double> logp, std::span<const double> logq) {
  ValueGrad out;
  out.grad.resize(logp.size());
  double kl = 0.0;
  for (std::size_t j = 0; j < logp.size(); ++j) {
    const double p = std::exp(logp[j]);
    if (p == 0.0) continue;
    if (!std::isfinite(logq[j])) throw Error("unsupported target");
    kl += p * (logp[j] - logq[j]);
  }
  kl = std::max(kl, 0.0);
  for (std::size_t j = 0; j < logp.size(); ++j) {
    const double p = std::exp(logp[j]);
    out.grad[j] = p == 0.0 ? 0.0 : p * (logp[j] - logq[j] - kl);
  }
  out.value = kl;
  return out;
}

inline ValueGrad kl_categorical(const PolicyParams& p, const PolicyParams& q, std::size_t context) {
  if (!p.same_shape(q)) throw Error("policies differ in shape");
  detail::check_context(p, context);
  std::vector<double> lp(p.vocab_size()), lq(q.vocab_size());
  log_softmax(p.row(context), 1.0, lp);
  log_softmax(q.row(context), 1.0, lq);
  return kl_from_logdists(lp, lq);
}

inline ValueGrad kl_categorical(const PolicyParams& p, const PolicySnapshot& q, std::size_t context) {
  return kl_categorical(p, q.params(), context);
}

/// H = -sum p log p with dH/dz_j = -p_j (log p_j + H).
inline ValueGrad entropy_from_logdist(std::span<const double> logp) {
  ValueGrad out;
  out.grad.resize(logp.size());
  double h = 0.0;
  for (double lp : logp) {
    const double p = std::exp(lp);
    if (p > 0.0) h -= p * lp;
  }
  for (std::size_t j = 0; j < logp.size(); ++j) {
    const double p = std::exp(logp[j]);
    out.grad[j] = p == 0.0 ? 0.0 : -p * (logp[j] + h);
  }
  out.value = h;
  return out;
}

inline ValueGrad entropy(const PolicyParams& params, std::size_t context) {
  detail::check_context(params, context);
  std::vector<double> lp(params.vocab_size());
  log_softmax(params.row(context), 1.0, lp);
  return entropy_from_logdist(lp);
}

/// Copy with every logit rounded to the nearest multiple of step (half away from zero).
inline PolicySnapshot quantize_logits(const PolicyParams& params, double step, std::int64_t stamp = 0) {
  if (!(step > 0.0)) throw Error("quantize step must be positive");
  PolicyParams q = params;
  for (double& z : q.logits()) z = std::round(z / step) * step;
  return PolicySnapshot(std::move(q), stamp);
}

inline PolicySnapshot quantize_logits(const PolicySnapshot& snap, double step) {
  return quantize_logits(snap.params(), step, snap.step());
}

// ---------------------------------------------------------------------------
// Sampling.

/// Inverse-CDF draw; falls back to the last positive-mass token on round-off.
inline Token sample_index(std::span<const double> probs, double u) {
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (probs[j] <= 0.0) continue;
    cum += probs[j];
    last = j;
    if (u < cum) return static_cast<Token>(j);
  }
  return static_cast<Token>(last);
}

/// Samples one completion at the given temperature. Records carry the tempered,
/// renormalized log-prob as logp_behavior and, until the trainer recomputes it,
/// the same value as logp_current.
inline SequenceRollout sample_completion(const PolicyParams& params, const ContextEncoder& encoder,
                                         std::span<const Token> prompt, std::size_t max_tokens,
                                         double temperature, Rng& rng, Token eos) {
  if (max_tokens < 1) throw Error("max_tokens must be at least 1");
  detail::check_temperature(temperature);
  const std::size_t v = params.vocab_size();
  SequenceRollout out;
  out.prompt.assign(prompt.begin(), prompt.end());
  out.behavior.temperature = temperature;
  std::vector<double> logdist(v), probs(v);
  while (out.completion.size() < max_tokens) {
    const std::uint32_t ctx = encoder.encode(prompt, out.completion);
    const auto row = params.row(ctx);
    log_softmax(row, temperature, logdist);
    for (std::size_t j = 0; j < v; ++j) probs[j] = std::exp(logdist[j]);
    const Token t = sample_index(probs, rng.uniform());
    TokenRecord rec;
    rec.context_id = ctx;
    rec.token_id = t;
    rec.logp_behavior = logdist[static_cast<std::size_t>(t)];
    rec.logp_current = rec.logp_behavior;
    out.records.push_back(rec);
    out.behavior_logdist.insert(out.behavior_logdist.end(), logdist.begin(), logdist.end());
    out.completion.push_back(t);
    if (t == eos) break;
  }
  return out;
}

/// Argmax decoding with ties broken toward the lowest token id.
inline TokenSeq greedy_completion(const PolicyParams& params, const ContextEncoder& encoder,
                                  std::span<const Token> prompt, std::size_t max_tokens, Token eos) {
  TokenSeq out;
  while (out.size() < max_tokens) {
    const auto row = params.row(encoder.encode(prompt, out));
    const auto best = static_cast<Token>(std::max_element(row.begin(), row.end()) - row.begin());
    out.push_back(best);
    if (best == eos) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Snapshot text format, version 1:
//
//   esslab-policy 1
//   vocab_size <V>
//   context_order <m>
//   step <stamp>
//   <V hexfloat logits per line, one line per context row>
//
// Hexadecimal floats make the round trip exact.

inline void save_policy(std::ostream& os, const PolicyParams& params, std::int64_t step = 0) {
  os << "esslab-policy 1\n"
     << "vocab_size " << params.vocab_size() << "\n"
     << "context_order " << params.context_order() << "\n"
     << "step " << step << "\n";
  char buf[64];
  for (std::size_t r = 0; r < params.num_contexts(); ++r) {
    const auto row = params.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) {
      std::snprintf(buf, sizeof(buf), "%a", row[j]);
      os << (j ? " " : "") << buf;
    }
    os << "\n";
  }
}

inline void save_policy(std::ostream& os, const PolicySnapshot& snap) { save_policy(os, snap.params(), snap.step()); }

inline PolicySnapshot load_policy(std::istream& is) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != "esslab-policy") throw Error("not a policy snapshot");
  if (version != 1) throw Error("unsupported snapshot version " + std::to_string(version));
  auto field = [&is](const char* name) {
    std::string key;
    long long value = 0;
    if (!(is >> key >> value) || key != name) throw Error(std::string("snapshot: expected ") + name);
    return value;
  };
  const auto v = field("vocab_size");
  const auto m = field("context_order");
  const auto step = field("step");
  if (v < 2 || m < 1) throw Error("snapshot: bad shape");
  PolicyParams params(static_cast<std::size_t>(v), static_cast<std::size_t>(m));
  std::string tok;
  for (double& z : params.logits()) {
    if (!(is >> tok)) throw Error("snapshot: truncated");
    char* end = nullptr;
    z = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0' || !std::isfinite(z)) throw Error("snapshot: bad logit");
  }
  if (is >> tok) throw Error("snapshot: trailing data");
  return PolicySnapshot(std::move(params), step);
}

}  // namespace esslab
