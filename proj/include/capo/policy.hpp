#pragma once

// Linear-softmax sequence policy: L reasoning steps over a reasoning
// vocabulary, then one answer token.
//
// Reasoning vocabulary layout (size V):
//   [0, K)            conclusion tokens; token c states "the answer is c"
//   [K, K + fillers)  filler tokens
//   K + fillers       stop token (only when shape.stop_token)
//
// Step t logits:  W_r[t][q] x + B_r[t][q]          (perception enters here)
// Answer logits:  B_a[q] + C[ctx]                   (question prior + stated conclusion)
// where ctx is the last conclusion token emitted (0 = none, c + 1 = conclusion c).
//
// W_r carries every feature-dependent ("image-use") parameter; B_r, B_a hold
// question-conditioned ("text-bias") parameters; C is the reasoning-to-answer
// coupling. Steps do not depend on earlier tokens except through ctx, so the
// sequence distribution is a small Markov chain over ctx and exact sequence
// functionals (KL, entropy) are computed by dynamic programming.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/random.hpp"

namespace capo {

struct PolicyShape {
  int d = 8;
  int Q = 6;
  int K = 3;
  int fillers = 2;
  int L = 4;
  bool stop_token = true;
  bool answer_features = false;  // answer step also reads the observation
  double input_gain = 1.0;       // features enter every logit as input_gain * x

  int vocab() const { return K + fillers + (stop_token ? 1 : 0); }
  int stop_index() const { return stop_token ? K + fillers : -1; }
  int contexts() const { return K + 1; }

  bool is_conclusion(int tok) const { return tok >= 0 && tok < K; }
  bool is_stop(int tok) const { return stop_token && tok == K + fillers; }

  std::size_t w_offset() const { return 0; }
  std::size_t br_offset() const { return w_offset() + sz(L) * sz(Q) * sz(vocab()) * sz(d); }
  std::size_t ba_offset() const { return br_offset() + sz(L) * sz(Q) * sz(vocab()); }
  std::size_t c_offset() const { return ba_offset() + sz(Q) * sz(K); }
  std::size_t wa_offset() const { return c_offset() + sz(contexts()) * sz(K); }
  std::size_t size() const { return wa_offset() + (answer_features ? sz(Q) * sz(K) * sz(d) : 0); }

  std::size_t w_index(int t, int q, int j, int k) const {
    return w_offset() + ((sz(t) * sz(Q) + sz(q)) * sz(vocab()) + sz(j)) * sz(d) + sz(k);
  }
  std::size_t br_index(int t, int q, int j) const {
    return br_offset() + (sz(t) * sz(Q) + sz(q)) * sz(vocab()) + sz(j);
  }
  std::size_t ba_index(int q, int a) const { return ba_offset() + sz(q) * sz(K) + sz(a); }
  std::size_t c_index(int ctx, int a) const { return c_offset() + sz(ctx) * sz(K) + sz(a); }
  std::size_t wa_index(int q, int a, int k) const { return wa_offset() + (sz(q) * sz(K) + sz(a)) * sz(d) + sz(k); }

  void validate() const {
    if (d < 1 || Q < 1 || K < 2 || fillers < 0 || L < 0)
      throw ConfigError("policy shape requires d >= 1, Q >= 1, K >= 2, fillers >= 0, L >= 0");
    if (!(input_gain > 0.0 && std::isfinite(input_gain))) throw ConfigError("policy input_gain must be finite and > 0");
  }

  friend bool operator==(const PolicyShape&, const PolicyShape&) = default;

 private:
  static std::size_t sz(int v) { return static_cast<std::size_t>(v); }
};

/// Flat parameter vector in the layout described by PolicyShape.
struct Gradient {
  std::vector<double> values;

  explicit Gradient(std::size_t n = 0) : values(n, 0.0) {}

  Gradient& operator+=(const Gradient& o) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += o.values[i];
    return *this;
  }
  Gradient& operator*=(double s) {
    for (double& v : values) v *= s;
    return *this;
  }
  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }
};

class PolicyParams {
 public:
  PolicyParams() = default;
  explicit PolicyParams(PolicyShape shape, std::uint64_t version = 0)
      : shape_(shape), values_(shape.size(), 0.0), version_(version) {
    shape_.validate();
  }

  const PolicyShape& shape() const { return shape_; }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::uint64_t version() const { return version_; }
  void set_version(std::uint64_t v) { version_ = v; }

  double& w(int t, int q, int j, int k) { return values_[shape_.w_index(t, q, j, k)]; }
  double w(int t, int q, int j, int k) const { return values_[shape_.w_index(t, q, j, k)]; }
  double& br(int t, int q, int j) { return values_[shape_.br_index(t, q, j)]; }
  double br(int t, int q, int j) const { return values_[shape_.br_index(t, q, j)]; }
  double& ba(int q, int a) { return values_[shape_.ba_index(q, a)]; }
  double ba(int q, int a) const { return values_[shape_.ba_index(q, a)]; }
  double& c(int ctx, int a) { return values_[shape_.c_index(ctx, a)]; }
  double c(int ctx, int a) const { return values_[shape_.c_index(ctx, a)]; }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  /// theta += scale * g; bumps the version.
  void apply(const Gradient& g, double scale) {
    if (g.values.size() != values_.size()) throw UsageError("gradient size mismatch");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * g.values[i];
    ++version_;
  }

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;

 private:
  PolicyShape shape_;
  std::vector<double> values_;
  std::uint64_t version_ = 0;
};

/// Random-normal initialization. `init_consistency` adds a positive diagonal
/// to the conclusion->answer coupling C, modelling a base model that already
/// tends to answer what its reasoning concluded.
inline PolicyParams make_policy(const PolicyShape& shape, double init_scale,
                                double init_consistency, std::uint64_t seed) {
  PolicyParams p(shape);
  Rng rng(seed);
  for (double& v : p.values()) v = init_scale * rng.normal();
  for (int c = 0; c < shape.K; ++c) p.c(c + 1, c) += init_consistency;
  return p;
}

struct Rollout {
  std::uint64_t item_id = 0;
  std::vector<int> reasoning;          // may end with the stop token
  int answer = 0;
  std::vector<double> token_logprobs;  // |reasoning| + 1, temperature-1 behavior log-probs
  std::uint64_t behavior_version = 0;
  bool from_corrupted = false;

  /// Emitted reasoning tokens, not counting a trailing stop token.
  std::size_t response_length(const PolicyShape& s) const {
    std::size_t n = reasoning.size();
    if (n > 0 && s.is_stop(reasoning.back())) --n;
    return n;
  }

  friend bool operator==(const Rollout&, const Rollout&) = default;
};

struct SamplingConfig {
  double temperature = 1.0;       // 0 selects greedy decoding
  int max_reasoning_length = -1;  // < 0: use the policy's L
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// numerics

inline std::vector<double> log_softmax(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  const double lse = m + std::log(s);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
  return out;
}

inline std::vector<double> softmax(std::span<const double> z) {
  auto out = log_softmax(z);
  for (double& v : out) v = std::exp(v);
  return out;
}

/// Lowest index among maxima.
inline int argmax(std::span<const double> z) {
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

/// KL(p || q) for categorical distributions given as probabilities.
inline double categorical_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw UsageError("categorical_kl: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  return kl;
}

// ---------------------------------------------------------------------------
// logits

inline void check_observation(const PolicyParams& params, const Observation& obs) {
  const auto& s = params.shape();
  if (obs.features.size() != static_cast<std::size_t>(s.d))
    throw UsageError("observation dimension " + std::to_string(obs.features.size()) +
                     " does not match policy dimension " + std::to_string(s.d));
  if (obs.question_id < 0 || obs.question_id >= s.Q)
    throw UsageError("question id " + std::to_string(obs.question_id) + " out of range");
}

inline std::vector<double> reasoning_logits(const PolicyParams& params, const Observation& obs, int t) {
  const auto& s = params.shape();
  const int q = obs.question_id;
  std::vector<double> z(s.vocab());
  for (int j = 0; j < s.vocab(); ++j) {
    double acc = params.br(t, q, j);
    for (int k = 0; k < s.d; ++k) acc += params.w(t, q, j, k) * (s.input_gain * obs.features[k]);
    z[j] = acc;
  }
  return z;
}

inline std::vector<double> answer_logits(const PolicyParams& params, const Observation& obs, int ctx) {
  const auto& s = params.shape();
  const int q = obs.question_id;
  std::vector<double> z(s.K);
  for (int a = 0; a < s.K; ++a) {
    z[a] = params.ba(q, a) + params.c(ctx, a);
    if (s.answer_features)
      for (int k = 0; k < s.d; ++k) z[a] += params.values()[s.wa_index(q, a, k)] * (s.input_gain * obs.features[k]);
  }
  return z;
}

/// Answer context after a reasoning sequence: 0 when no conclusion token was
/// emitted, otherwise 1 + the last conclusion token.
inline int answer_context(const PolicyShape& s, std::span<const int> reasoning) {
  for (auto it = reasoning.rbegin(); it != reasoning.rend(); ++it)
    if (s.is_conclusion(*it)) return *it + 1;
  return 0;
}

// ---------------------------------------------------------------------------
// sampling

namespace detail {

inline int pick_token(std::span<const double> logits, double temperature, double u) {
  if (temperature <= 0.0) return argmax(logits);
  std::vector<double> scaled(logits.begin(), logits.end());
  for (double& v : scaled) v /= temperature;
  const auto p = softmax(scaled);
  double cum = 0.0;
  int last_positive = 0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] > 0.0) last_positive = static_cast<int>(j);
    cum += p[j];
    if (u < cum) return static_cast<int>(j);
  }
  return last_positive;
}

}  // namespace detail

/// Samples one rollout by inverse-CDF with caller-supplied uniforms: uniforms[t]
/// drives reasoning step t and uniforms[L] drives the answer. Feeding the same
/// uniforms with two observations yields a common-random-numbers pair.
inline Rollout sample_with_uniforms(const PolicyParams& params, const Observation& obs,
                                    double temperature, std::span<const double> uniforms,
                                    int max_reasoning_length = -1) {
  check_observation(params, obs);
  const auto& s = params.shape();
  if (uniforms.size() < static_cast<std::size_t>(s.L) + 1)
    throw UsageError("sample_with_uniforms: need L + 1 uniforms");
  const int steps = max_reasoning_length < 0 ? s.L : std::min(max_reasoning_length, s.L);

  Rollout r;
  r.behavior_version = params.version();
  r.from_corrupted = obs.corrupted;
  for (int t = 0; t < steps; ++t) {
    const auto z = reasoning_logits(params, obs, t);
    const int tok = detail::pick_token(z, temperature, uniforms[t]);
    r.reasoning.push_back(tok);
    r.token_logprobs.push_back(log_softmax(z)[tok]);
    if (s.is_stop(tok)) break;
  }
  const int ctx = answer_context(s, r.reasoning);
  const auto za = answer_logits(params, obs, ctx);
  r.answer = detail::pick_token(za, temperature, uniforms[s.L]);
  r.token_logprobs.push_back(log_softmax(za)[r.answer]);
  return r;
}

inline Rollout sample_rollout(const PolicyParams& params, const Observation& obs,
                              const SamplingConfig& scfg, Rng& rng) {
  if (scfg.temperature < 0.0) throw UsageError("sampling temperature must be >= 0");
  std::vector<double> u(static_cast<std::size_t>(params.shape().L) + 1);
  for (double& v : u) v = rng.uniform();
  return sample_with_uniforms(params, obs, scfg.temperature, u, scfg.max_reasoning_length);
}

inline Rollout sample_rollout(const PolicyParams& params, const Observation& obs,
                              const SamplingConfig& scfg) {
  Rng rng(scfg.seed);
  return sample_rollout(params, obs, scfg, rng);
}

inline Rollout greedy_rollout(const PolicyParams& params, const Observation& obs) {
  std::vector<double> u(static_cast<std::size_t>(params.shape().L) + 1, 0.0);
  return sample_with_uniforms(params, obs, 0.0, u);
}

// ---------------------------------------------------------------------------
// log-probabilities and gradients

inline void check_rollout(const PolicyParams& params, const Rollout& r) {
  const auto& s = params.shape();
  if (r.reasoning.size() > static_cast<std::size_t>(s.L))
    throw UsageError("rollout longer than the policy's reasoning length");
  for (std::size_t t = 0; t < r.reasoning.size(); ++t) {
    const int tok = r.reasoning[t];
    if (tok < 0 || tok >= s.vocab()) throw UsageError("reasoning token out of vocabulary");
    if (s.is_stop(tok) && t + 1 != r.reasoning.size())
      throw UsageError("stop token must terminate the reasoning sequence");
  }
  if (r.answer < 0 || r.answer >= s.K) throw UsageError("answer token out of vocabulary");
}

/// Per-token log-probabilities (reasoning tokens then answer) at temperature 1.
inline std::vector<double> logprob_of(const PolicyParams& params, const Observation& obs,
                                      const Rollout& r) {
  check_observation(params, obs);
  check_rollout(params, r);
  std::vector<double> out;
  out.reserve(r.reasoning.size() + 1);
  for (std::size_t t = 0; t < r.reasoning.size(); ++t)
    out.push_back(log_softmax(reasoning_logits(params, obs, static_cast<int>(t)))[r.reasoning[t]]);
  const int ctx = answer_context(params.shape(), r.reasoning);
  out.push_back(log_softmax(answer_logits(params, obs, ctx))[r.answer]);
  return out;
}

inline double sequence_logprob(const PolicyParams& params, const Observation& obs, const Rollout& r) {
  double s = 0.0;
  for (double v : logprob_of(params, obs, r)) s += v;
  return s;
}

/// grad += sum_t weights[t] * d log pi(token_t) / d theta.
inline void accumulate_logprob_grad(const PolicyParams& params, const Observation& obs,
                                    const Rollout& r, std::span<const double> weights,
                                    Gradient& grad) {
  check_observation(params, obs);
  check_rollout(params, r);
  const auto& s = params.shape();
  if (weights.size() != r.reasoning.size() + 1) throw UsageError("token weight count mismatch");
  if (grad.values.size() != s.size()) throw UsageError("gradient size mismatch");
  const int q = obs.question_id;
  auto& g = grad.values;

  for (std::size_t t = 0; t < r.reasoning.size(); ++t) {
    const double wt = weights[t];
    if (wt == 0.0) continue;
    const int step = static_cast<int>(t);
    const auto p = softmax(reasoning_logits(params, obs, step));
    for (int j = 0; j < s.vocab(); ++j) {
      const double score = wt * ((j == r.reasoning[t] ? 1.0 : 0.0) - p[j]);
      g[s.br_index(step, q, j)] += score;
      for (int k = 0; k < s.d; ++k) g[s.w_index(step, q, j, k)] += score * (s.input_gain * obs.features[k]);
    }
  }
  const double wa = weights.back();
  if (wa != 0.0) {
    const int ctx = answer_context(s, r.reasoning);
    const auto p = softmax(answer_logits(params, obs, ctx));
    for (int a = 0; a < s.K; ++a) {
      const double score = wa * ((a == r.answer ? 1.0 : 0.0) - p[a]);
      g[s.ba_index(q, a)] += score;
      g[s.c_index(ctx, a)] += score;
      if (s.answer_features)
        for (int k = 0; k < s.d; ++k) g[s.wa_index(q, a, k)] += score * (s.input_gain * obs.features[k]);
    }
  }
}

/// Gradient of the sequence log-probability.
inline Gradient grad_logprob(const PolicyParams& params, const Observation& obs, const Rollout& r) {
  Gradient g(params.shape().size());
  std::vector<double> ones(r.reasoning.size() + 1, 1.0);
  accumulate_logprob_grad(params, obs, r, ones, g);
  return g;
}

// ---------------------------------------------------------------------------
// exact sequence functionals

struct ExactValue {
  double value = 0.0;
  Gradient grad;  // empty unless requested
};

namespace detail {

/// E_{o ~ pi}[ sum_t g(token_t | context_t) ] where g is a per-token score that
/// may itself depend on pi (log-ratio, negative log-probability). The gradient
/// uses the identity sum_j p_j dg_j/dz = 0 that holds for both scores used
/// here, giving dz_k = m * p_k * (Q_k - V) per context.
///
/// step_score(t, logp) returns g over the reasoning vocabulary at step t;
/// answer_score(ctx, logp) returns g over the answer vocabulary.
template <class StepScore, class AnswerScore>
ExactValue sequence_expectation(const PolicyParams& params, const Observation& obs,
                                StepScore&& step_score, AnswerScore&& answer_score,
                                bool want_grad) {
  check_observation(params, obs);
  const auto& s = params.shape();
  const int L = s.L, V = s.vocab(), S = s.contexts(), K = s.K;
  const int q = obs.question_id;
  const int stop = s.stop_index();

  std::vector<std::vector<double>> p(L), g(L);
  for (int t = 0; t < L; ++t) {
    const auto lp = log_softmax(reasoning_logits(params, obs, t));
    g[t] = step_score(t, lp);
    p[t].resize(V);
    for (int j = 0; j < V; ++j) p[t][j] = std::exp(lp[j]);
  }
  std::vector<std::vector<double>> pa(S), ga(S);
  std::vector<double> v_ans(S, 0.0);
  for (int c = 0; c < S; ++c) {
    const auto lp = log_softmax(answer_logits(params, obs, c));
    ga[c] = answer_score(c, lp);
    pa[c].resize(K);
    for (int a = 0; a < K; ++a) {
      pa[c][a] = std::exp(lp[a]);
      v_ans[c] += pa[c][a] * ga[c][a];
    }
  }

  // value[t][c]: expected remaining score when alive before step t in context c
  std::vector<std::vector<double>> value(L + 1, std::vector<double>(S, 0.0));
  value[L] = v_ans;
  auto next_value = [&](int t, int j, int c) {
    if (j < K) return value[t + 1][j + 1];
    if (j == stop) return v_ans[c];
    return value[t + 1][c];
  };
  for (int t = L - 1; t >= 0; --t)
    for (int c = 0; c < S; ++c) {
      double acc = 0.0;
      for (int j = 0; j < V; ++j) acc += p[t][j] * (g[t][j] + next_value(t, j, c));
      value[t][c] = acc;
    }

  ExactValue out;
  out.value = value[0][0];
  if (!want_grad) return out;

  // forward occupancy of (step, context) and of answer contexts
  std::vector<std::vector<double>> occ(L + 1, std::vector<double>(S, 0.0));
  std::vector<double> occ_ans(S, 0.0);
  occ[0][0] = 1.0;
  for (int t = 0; t < L; ++t)
    for (int c = 0; c < S; ++c) {
      const double m = occ[t][c];
      if (m == 0.0) continue;
      for (int j = 0; j < V; ++j) {
        if (j < K) occ[t + 1][j + 1] += m * p[t][j];
        else if (j == stop) occ_ans[c] += m * p[t][j];
        else occ[t + 1][c] += m * p[t][j];
      }
    }
  for (int c = 0; c < S; ++c) occ_ans[c] += occ[L][c];

  out.grad = Gradient(s.size());
  auto& gr = out.grad.values;
  for (int t = 0; t < L; ++t)
    for (int j = 0; j < V; ++j) {
      double dz = 0.0;
      for (int c = 0; c < S; ++c) {
        if (occ[t][c] == 0.0) continue;
        dz += occ[t][c] * p[t][j] * (g[t][j] + next_value(t, j, c) - value[t][c]);
      }
      gr[s.br_index(t, q, j)] += dz;
      for (int k = 0; k < s.d; ++k) gr[s.w_index(t, q, j, k)] += dz * (s.input_gain * obs.features[k]);
    }
  for (int c = 0; c < S; ++c)
    for (int a = 0; a < K; ++a) {
      const double dz = occ_ans[c] * pa[c][a] * (ga[c][a] - v_ans[c]);
      gr[s.ba_index(q, a)] += dz;
      gr[s.c_index(c, a)] += dz;
      if (s.answer_features)
        for (int k = 0; k < s.d; ++k) gr[s.wa_index(q, a, k)] += dz * (s.input_gain * obs.features[k]);
    }
  return out;
}

inline void check_same_shape(const PolicyParams& a, const PolicyParams& b) {
  if (!(a.shape() == b.shape())) throw UsageError("policy shapes differ");
}

}  // namespace detail

/// Exact KL(pi_p(.|obs) || pi_ref(.|obs)) over whole sequences, optionally
/// with its gradient w.r.t. p_params.
inline ExactValue kl_divergence_with_grad(const PolicyParams& p_params, const PolicyParams& ref_params,
                                          const Observation& obs, bool want_grad = true) {
  detail::check_same_shape(p_params, ref_params);
  check_observation(ref_params, obs);
  return detail::sequence_expectation(
      p_params, obs,
      [&](int t, const std::vector<double>& lp) {
        const auto lr = log_softmax(reasoning_logits(ref_params, obs, t));
        std::vector<double> g(lp.size());
        for (std::size_t j = 0; j < lp.size(); ++j) g[j] = lp[j] - lr[j];
        return g;
      },
      [&](int ctx, const std::vector<double>& lp) {
        const auto lr = log_softmax(answer_logits(ref_params, obs, ctx));
        std::vector<double> g(lp.size());
        for (std::size_t a = 0; a < lp.size(); ++a) g[a] = lp[a] - lr[a];
        return g;
      },
      want_grad);
}

inline double kl_divergence(const PolicyParams& p_params, const PolicyParams& ref_params,
                            const Observation& obs) {
  // clamp tiny negative round-off
  return std::max(0.0, kl_divergence_with_grad(p_params, ref_params, obs, false).value);
}

/// Exact sequence entropy of pi(.|obs), optionally with gradient.
inline ExactValue entropy_with_grad(const PolicyParams& params, const Observation& obs,
                                    bool want_grad = true) {
  auto neg = [](int, const std::vector<double>& lp) {
    std::vector<double> g(lp.size());
    for (std::size_t j = 0; j < lp.size(); ++j) g[j] = -lp[j];
    return g;
  };
  return detail::sequence_expectation(params, obs, neg, neg, want_grad);
}

inline double sequence_entropy(const PolicyParams& params, const Observation& obs) {
  return entropy_with_grad(params, obs, false).value;
}

}  // namespace capo
