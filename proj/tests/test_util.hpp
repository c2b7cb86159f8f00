#pragma once

// Shared fixtures and oracles for the unit and acceptance tests.

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "capo/env.hpp"
#include "capo/optimizer.hpp"
#include "capo/policy.hpp"
#include "capo/random.hpp"

namespace capo::testing {

inline std::vector<double> to_vec(std::span<const double> v) { return {v.begin(), v.end()}; }

/// Small random shape: d <= 4, K <= 3, L <= 3.
inline PolicyShape small_shape(std::uint64_t seed = 0) {
  Rng rng(derive_seed(seed, {0x5ab}));
  PolicyShape s;
  s.d = 2 + static_cast<int>(rng.index(3));
  s.Q = 1 + static_cast<int>(rng.index(2));
  s.K = 2 + static_cast<int>(rng.index(2));
  s.fillers = static_cast<int>(rng.index(2));
  s.L = 1 + static_cast<int>(rng.index(3));
  s.stop_token = rng.bernoulli(0.5);
  return s;
}

inline PolicyParams random_policy(const PolicyShape& s, std::uint64_t seed, double scale = 0.8) {
  return make_policy(s, scale, 0.5, derive_seed(seed, {0x90c}));
}

inline Observation random_observation(const PolicyShape& s, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x0b5}));
  Observation obs;
  obs.features.resize(s.d);
  for (double& v : obs.features) v = rng.normal();
  obs.question_id = static_cast<int>(rng.index(s.Q));
  return obs;
}

/// Central differences with h = 1e-5 over every parameter.
inline std::vector<double> finite_difference(const PolicyParams& p,
                                             const std::function<double(const PolicyParams&)>& f,
                                             double h = 1e-5) {
  std::vector<double> out(p.values().size());
  PolicyParams q = p;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double orig = q.values()[i];
    q.values()[i] = orig + h;
    const double up = f(q);
    q.values()[i] = orig - h;
    const double down = f(q);
    q.values()[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

/// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor). The floor keeps components
/// that are zero up to round-off from dominating.
inline double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                                 double floor = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

/// Visits every complete rollout the shape can generate.
inline void for_each_sequence(const PolicyShape& s, const std::function<void(const Rollout&)>& visit) {
  Rollout r;
  std::function<void()> rec = [&] {
    const bool stopped = !r.reasoning.empty() && s.is_stop(r.reasoning.back());
    if (stopped || static_cast<int>(r.reasoning.size()) == s.L) {
      for (int a = 0; a < s.K; ++a) {
        r.answer = a;
        visit(r);
      }
      return;
    }
    for (int j = 0; j < s.vocab(); ++j) {
      r.reasoning.push_back(j);
      rec();
      r.reasoning.pop_back();
    }
  };
  rec();
}

inline double enumerate_kl(const PolicyParams& p, const PolicyParams& ref, const Observation& obs) {
  double kl = 0.0;
  for_each_sequence(p.shape(), [&](const Rollout& r) {
    const double lp = sequence_logprob(p, obs, r);
    kl += std::exp(lp) * (lp - sequence_logprob(ref, obs, r));
  });
  return kl;
}

inline double enumerate_entropy(const PolicyParams& p, const Observation& obs) {
  double h = 0.0;
  for_each_sequence(p.shape(), [&](const Rollout& r) {
    const double lp = sequence_logprob(p, obs, r);
    h -= std::exp(lp) * lp;
  });
  return h;
}

struct SurrogateCheck {
  double max_rel_error = 0.0;
  double clip_fraction = 0.0;
};

/// Random small instance of the full clipped surrogate (policy term, KL and
/// entropy) evaluated away from the behavior policy, so that some tokens sit
/// in the clipped branch. Parameter draws that put a ratio within 1e-3 of a
/// clip boundary are redrawn: the objective has a kink there.
inline SurrogateCheck surrogate_gradient_check(std::uint64_t seed) {
  const PolicyShape shape = small_shape(seed);
  const PolicyParams old = random_policy(shape, seed);
  const PolicyParams ref = random_policy(shape, seed + 1);
  Rng rng(derive_seed(seed, {0xfd}));

  TaskItem item;
  item.item_id = seed;
  item.observation.features.resize(shape.d);
  for (double& v : item.observation.features) v = rng.normal();
  item.observation.question_id = static_cast<int>(rng.index(shape.Q));
  item.gold_answer = static_cast<int>(rng.index(shape.K));

  OptimConfig ocfg;
  ocfg.G = 4;
  if (seed % 2 == 1) {
    ocfg.kl_beta = 0.5;
    ocfg.entropy_coef = 0.3;
  }
  PerturbationConfig pcfg;
  RewardConfig rcfg;
  RuleJudge judge;
  GroupBatch g = build_group(old, item, pcfg, ocfg, rcfg, judge, derive_seed(seed, {0x9}));
  assign_advantages(g, ocfg.delta);
  if (std::all_of(g.advantages.begin(), g.advantages.end(), [](double a) { return a == 0.0; }))
    for (double& a : g.advantages) a = rng.normal();

  PolicyParams theta = old;
  for (int attempt = 0;; ++attempt) {
    theta = old;
    for (double& v : theta.values()) v += 0.3 * rng.normal();
    bool near_kink = false;
    for (const auto& r : g.originals) {
      const auto lp = logprob_of(theta, item.observation, r);
      for (std::size_t t = 0; t < lp.size(); ++t) {
        const double rho = std::exp(lp[t] - r.token_logprobs[t]);
        near_kink |= std::abs(rho - (1.0 - ocfg.clip_eps)) < 1e-3 || std::abs(rho - (1.0 + ocfg.clip_eps)) < 1e-3;
      }
    }
    if (!near_kink || attempt > 100) break;
  }

  const auto res = surrogate_loss(theta, ref, g, ocfg, old.version());
  const auto num = finite_difference(theta, [&](const PolicyParams& q) {
    return surrogate_loss(q, ref, g, ocfg, old.version()).loss;
  });
  return {max_relative_error(res.grad.values, num), res.clip_fraction};
}

/// Items whose behavior under `policy` is known by construction: question 0
/// is always answered correctly, question 1 always wrongly, question 2 is a
/// uniform guess over K=3 answers (mixed with overwhelming probability at 40
/// samples).
struct RiggedFilterCase {
  PolicyParams policy;
  std::vector<TaskItem> items;
  std::vector<std::uint64_t> mixed_ids;
  std::size_t all_correct = 0, all_wrong = 0;
};

inline RiggedFilterCase rigged_filter_case(int n_items = 60) {
  PolicyShape s;
  s.d = 3;
  s.Q = 3;
  s.K = 3;
  s.fillers = 0;
  s.L = 1;
  s.stop_token = false;
  RiggedFilterCase rc{PolicyParams(s), {}, {}};
  rc.policy.ba(0, 0) = 50.0;
  rc.policy.ba(1, 0) = 50.0;
  Rng rng(17);
  for (int i = 0; i < n_items; ++i) {
    TaskItem it;
    it.item_id = 1000 + static_cast<std::uint64_t>(i);
    it.observation.question_id = i % 3;
    it.observation.features = {rng.normal(), rng.normal(), rng.normal()};
    it.gold_answer = i % 3 == 1 ? 1 : static_cast<int>(rng.index(3)) * (i % 3 == 2);
    it.difficulty = rule_for(i % 3, 3).level;
    if (i % 3 == 0) ++rc.all_correct;
    else if (i % 3 == 1) ++rc.all_wrong;
    else rc.mixed_ids.push_back(it.item_id);
    rc.items.push_back(std::move(it));
  }
  return rc;
}

/// pass@k by enumerating every k-subset of n samples whose first c are
/// correct: (subsets containing a correct sample, all subsets).
inline std::pair<std::uint64_t, std::uint64_t> enumerate_pass_at_k(int n, int c, int k) {
  std::uint64_t hit = 0, total = 0;
  const std::uint32_t correct_mask = (1u << c) - 1u;
  for (std::uint32_t m = 0; m < (1u << n); ++m) {
    if (std::popcount(m) != k) continue;
    ++total;
    hit += (m & correct_mask) != 0;
  }
  return {hit, total};
}

}  // namespace capo::testing
