#pragma once

// Group rollouts with original/corrupted pairing, group-normalized
// advantages, and the clipped surrogate objective with KL and entropy terms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/judge.hpp"
#include "capo/policy.hpp"
#include "capo/random.hpp"
#include "capo/rewards.hpp"

namespace capo {

enum class Algorithm { CAPO, GRPO_DAR_only, DAR_CDR, DAR_PCR };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::CAPO: return "capo";
    case Algorithm::GRPO_DAR_only: return "grpo_dar_only";
    case Algorithm::DAR_CDR: return "dar_cdr";
    case Algorithm::DAR_PCR: return "dar_pcr";
  }
  return "unknown";
}

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "capo") return Algorithm::CAPO;
  if (s == "grpo_dar_only" || s == "grpo") return Algorithm::GRPO_DAR_only;
  if (s == "dar_cdr") return Algorithm::DAR_CDR;
  if (s == "dar_pcr") return Algorithm::DAR_PCR;
  throw ConfigError("unknown algorithm '" + s + "'");
}

inline bool uses_cdr(Algorithm a) { return a == Algorithm::CAPO || a == Algorithm::DAR_CDR; }
inline bool uses_pcr(Algorithm a) { return a == Algorithm::CAPO || a == Algorithm::DAR_PCR; }

struct OptimConfig {
  int G = 8;
  double clip_eps = 0.2;
  double kl_beta = 1e-2;
  double entropy_coef = 1e-3;
  double delta = 1e-8;
  double learning_rate = 0.5;
  int batch_size = 64;
  int inner_epochs = 1;
  Algorithm algorithm = Algorithm::CAPO;
  double temperature = 1.0;

  void validate() const {
    if (G < 2) throw ConfigError("optim.G must be >= 2");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("optim.clip_eps must lie in (0, 1)");
    if (kl_beta < 0.0) throw ConfigError("optim.kl_beta must be >= 0");
    if (!(delta > 0.0)) throw ConfigError("optim.delta must be > 0");
    if (entropy_coef < 0.0) throw ConfigError("optim.entropy_coef must be >= 0");
    if (learning_rate < 0.0) throw ConfigError("optim.learning_rate must be >= 0");
    if (batch_size < 1) throw ConfigError("optim.batch_size must be >= 1");
    if (inner_epochs < 1) throw ConfigError("optim.inner_epochs must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("optim.temperature must be > 0");
  }
};

struct GroupBatch {
  TaskItem item;
  Observation corrupted_observation;
  std::vector<Rollout> originals;   // index-paired with `corrupted`
  std::vector<Rollout> corrupted;
  std::vector<double> corrupted_dar;
  std::vector<RewardBreakdown> rewards;
  std::vector<double> advantages;   // empty until compute_advantages
};

/// A = (r - mean) / (population std + delta); all-equal rewards give zeros.
inline std::vector<double> compute_advantages(std::span<const double> totals, double delta) {
  if (totals.size() < 2) throw UsageError("compute_advantages: group size must be >= 2");
  const double n = static_cast<double>(totals.size());
  std::vector<double> adv(totals.size(), 0.0);
  if (std::all_of(totals.begin(), totals.end(), [&](double v) { return v == totals[0]; })) return adv;
  const double mean = std::accumulate(totals.begin(), totals.end(), 0.0) / n;
  double var = 0.0;
  for (double v : totals) var += (v - mean) * (v - mean);
  const double denom = std::sqrt(var / n) + delta;
  for (std::size_t i = 0; i < totals.size(); ++i) adv[i] = (totals[i] - mean) / denom;
  return adv;
}

/// Samples G rollouts on the original observation and G on one shared
/// corruption of it, then scores the originals. Pair i is drawn with the same
/// uniforms on both inputs, so the two members differ only through the
/// input. Advantages are left empty.
inline GroupBatch build_group(const PolicyParams& params, const TaskItem& item,
                              const PerturbationConfig& pcfg, const OptimConfig& ocfg,
                              const RewardConfig& rcfg, Judge& judge, std::uint64_t seed) {
  ocfg.validate();
  const auto& shape = params.shape();
  GroupBatch g;
  g.item = item;
  Rng corrupt_rng(derive_seed(seed, {0xc0aa}));
  g.corrupted_observation = perturb(item.observation, pcfg, corrupt_rng);

  const bool with_cdr = uses_cdr(ocfg.algorithm);
  const bool with_pcr = uses_pcr(ocfg.algorithm);
  std::vector<double> u(static_cast<std::size_t>(shape.L) + 1);
  for (int i = 0; i < ocfg.G; ++i) {
    Rng rng(derive_seed(seed, {0x5a, static_cast<std::uint64_t>(i)}));
    for (double& v : u) v = rng.uniform();
    Rollout orig = sample_with_uniforms(params, item.observation, ocfg.temperature, u);
    Rollout corr = sample_with_uniforms(params, g.corrupted_observation, ocfg.temperature, u);
    orig.item_id = corr.item_id = item.item_id;

    const double corr_dar = answer_valid(corr, shape.K) ? dar(corr, item.gold_answer, rcfg) : 0.0;
    JudgeVerdict verdict;
    if (with_cdr) verdict = judge.judge(shape, item.observation, orig);
    g.rewards.push_back(capo_total(orig, item.gold_answer, shape.K, with_cdr ? &verdict : nullptr,
                                   with_pcr ? &corr_dar : nullptr, rcfg));
    g.corrupted_dar.push_back(corr_dar);
    g.originals.push_back(std::move(orig));
    g.corrupted.push_back(std::move(corr));
  }
  return g;
}

inline void assign_advantages(GroupBatch& g, double delta) {
  std::vector<double> totals;
  for (const auto& r : g.rewards) totals.push_back(r.total);
  g.advantages = compute_advantages(totals, delta);
}

struct SurrogateResult {
  double loss = 0.0;              // -(policy_term - beta * kl + entropy_coef * entropy)
  Gradient grad;                  // d loss / d theta
  double policy_term = 0.0;
  double kl = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;     // share of tokens whose clipped branch was active
  std::size_t rollouts_in_gradient = 0;
  std::size_t corrupted_in_gradient = 0;
};

/// Per-token clipped contribution min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)
/// and whether the unclipped branch is the active one.
inline std::pair<double, bool> clipped_term(double rho, double adv, double eps) {
  const double unclipped = rho * adv;
  const double clipped = std::clamp(rho, 1.0 - eps, 1.0 + eps) * adv;
  return unclipped <= clipped ? std::pair{unclipped, true} : std::pair{clipped, false};
}

/// Outcome supervision: every token of rollout i uses advantage A_i. The
/// policy term averages tokens within a rollout, then rollouts within the
/// group. Only original-input rollouts contribute.
inline SurrogateResult surrogate_loss(const PolicyParams& theta, const PolicyParams& reference,
                                      const GroupBatch& group, const OptimConfig& ocfg,
                                      std::uint64_t behavior_version) {
  const std::size_t G = group.originals.size();
  if (G == 0 || group.advantages.size() != G) throw UsageError("surrogate_loss: group has no advantages");
  const Observation& obs = group.item.observation;

  SurrogateResult out;
  out.grad = Gradient(theta.shape().size());
  std::size_t tokens = 0, clipped_tokens = 0;
  std::vector<double> weights;

  for (std::size_t i = 0; i < G; ++i) {
    const Rollout& r = group.originals[i];
    if (r.behavior_version != behavior_version)
      throw UsageError("surrogate_loss: rollout sampled by policy version " +
                       std::to_string(r.behavior_version) + ", expected " +
                       std::to_string(behavior_version));
    if (r.from_corrupted) throw UsageError("surrogate_loss: corrupted rollout in the original slot");
    if (r.token_logprobs.size() != r.reasoning.size() + 1)
      throw UsageError("surrogate_loss: rollout has inconsistent log-prob bookkeeping");

    const auto lp = logprob_of(theta, obs, r);
    const double A = group.advantages[i];
    const double scale = 1.0 / (static_cast<double>(G) * static_cast<double>(lp.size()));
    weights.assign(lp.size(), 0.0);
    for (std::size_t t = 0; t < lp.size(); ++t) {
      const double rho = std::exp(lp[t] - r.token_logprobs[t]);
      const auto [term, active] = clipped_term(rho, A, ocfg.clip_eps);
      out.policy_term += scale * term;
      // d(rho * A) = A * rho * d log pi
      if (active) weights[t] = -scale * A * rho;
      else ++clipped_tokens;
      ++tokens;
    }
    accumulate_logprob_grad(theta, obs, r, weights, out.grad);
    ++out.rollouts_in_gradient;
  }

  if (ocfg.kl_beta > 0.0) {
    auto kl = kl_divergence_with_grad(theta, reference, obs, true);
    out.kl = kl.value;
    kl.grad *= ocfg.kl_beta;
    out.grad += kl.grad;
  } else {
    out.kl = kl_divergence_with_grad(theta, reference, obs, false).value;
  }
  if (ocfg.entropy_coef > 0.0) {
    auto h = entropy_with_grad(theta, obs, true);
    out.entropy = h.value;
    h.grad *= -ocfg.entropy_coef;
    out.grad += h.grad;
  } else {
    out.entropy = entropy_with_grad(theta, obs, false).value;
  }
  out.loss = -(out.policy_term - ocfg.kl_beta * out.kl + ocfg.entropy_coef * out.entropy);
  out.clip_fraction = tokens ? static_cast<double>(clipped_tokens) / static_cast<double>(tokens) : 0.0;
  return out;
}

}  // namespace capo
