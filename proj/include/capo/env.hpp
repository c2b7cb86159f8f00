#pragma once

// Synthetic perceive-reason-answer tasks with a planted language-prior
// shortcut. Each question type owns a fixed rule over the feature vector and a
// "prior" answer that the training split over-represents.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capo/errors.hpp"
#include "capo/random.hpp"

namespace capo {

enum class PerturbationKind { Diffusion, Mask, Crop };

inline std::string to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::Diffusion: return "diffusion";
    case PerturbationKind::Mask: return "mask";
    case PerturbationKind::Crop: return "crop";
  }
  return "unknown";
}

inline PerturbationKind perturbation_kind_from_string(const std::string& s) {
  if (s == "diffusion") return PerturbationKind::Diffusion;
  if (s == "mask") return PerturbationKind::Mask;
  if (s == "crop") return PerturbationKind::Crop;
  throw ConfigError("unknown perturbation kind '" + s + "'");
}

struct CorruptionMeta {
  PerturbationKind kind = PerturbationKind::Diffusion;
  int diffusion_steps = 0;  // Diffusion only
  double fraction = 0.0;    // Mask / Crop only
};

struct Observation {
  std::vector<double> features;
  int question_id = 0;
  bool corrupted = false;
  std::optional<CorruptionMeta> corruption;  // present iff corrupted
};

enum class Difficulty : int { Level1 = 1, Level2 = 2, Level3 = 3 };

inline std::string to_string(Difficulty d) {
  return "Level" + std::to_string(static_cast<int>(d));
}

/// The generating rule of a question type.
///   Level1: bin one coordinate into K equiprobable bins (K = 2: x[c] > 0).
///   Level2: answer 1 iff x[i] > x[j] (ties resolve to 0).
///   Level3: parity of the number of positive coordinates in a 3-subset.
struct Rule {
  Difficulty level = Difficulty::Level1;
  std::vector<int> coords;
};

/// Rule family and designated coordinates depend only on the question id and
/// feature dimension, never on a seed.
inline Rule rule_for(int question_id, int d) {
  if (question_id < 0 || d < 1) throw UsageError("rule_for: invalid question id or dimension");
  Rule r;
  r.level = static_cast<Difficulty>(question_id % 3 + 1);
  const int n = static_cast<int>(r.level);
  for (int i = 0; i < n; ++i) r.coords.push_back((question_id + i) % d);
  return r;
}

/// Number of distinct answers a rule can produce.
inline int rule_range(const Rule& r, int K) { return r.level == Difficulty::Level1 ? K : 2; }

namespace detail {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double normal_quantile(double p) {
  double lo = -40.0, hi = 40.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (normal_cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Thresholds splitting N(0,1) into K equiprobable bins.
inline std::vector<double> level1_thresholds(int K) {
  std::vector<double> t;
  for (int i = 1; i < K; ++i) {
    t.push_back(2 * i == K ? 0.0 : detail::normal_quantile(static_cast<double>(i) / K));
  }
  return t;
}

inline int ground_truth(const Rule& rule, std::span<const double> x, int K) {
  for (int c : rule.coords) {
    if (c < 0 || static_cast<std::size_t>(c) >= x.size())
      throw UsageError("ground_truth: coordinate out of range");
  }
  switch (rule.level) {
    case Difficulty::Level1: {
      int a = 0;
      for (double t : level1_thresholds(K)) a += x[rule.coords[0]] > t ? 1 : 0;
      return a;
    }
    case Difficulty::Level2:
      return x[rule.coords[0]] > x[rule.coords[1]] ? 1 : 0;
    case Difficulty::Level3: {
      int positives = 0;
      for (int c : rule.coords) positives += x[c] > 0.0 ? 1 : 0;
      return positives % 2;
    }
  }
  return 0;
}

struct TaskItem {
  std::uint64_t item_id = 0;
  Observation observation;
  int gold_answer = 0;
  Difficulty difficulty = Difficulty::Level1;
  int prior_answer = 0;
};

struct EnvConfig {
  int d = 8;
  int Q = 6;
  int K = 3;
  double prior_strength = 0.85;
  int n_train = 2000;
  int n_eval_in_prior = 300;
  int n_eval_anti_prior = 2000;
  std::uint64_t seed = 0;

  void validate() const {
    if (d < 3) throw ConfigError("env.d must be >= 3");
    if (Q < 1) throw ConfigError("env.Q must be >= 1");
    if (K < 2) throw ConfigError("env.K must be >= 2");
    if (!(prior_strength >= 0.5 && prior_strength <= 1.0))
      throw ConfigError("env.prior_strength must lie in [0.5, 1]");
    if (n_train < 0 || n_eval_in_prior < 0 || n_eval_anti_prior < 0)
      throw ConfigError("env split sizes must be non-negative");
  }
};

struct Dataset {
  std::vector<TaskItem> train;
  std::vector<TaskItem> eval_in_prior;    // gold == prior
  std::vector<TaskItem> eval_anti_prior;  // gold != prior
  std::vector<int> prior_answers;         // indexed by question id
};

/// Shortcut answer per question type, drawn once per dataset seed.
inline std::vector<int> draw_prior_answers(const EnvConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, {0x9a1u}));
  std::vector<int> priors(cfg.Q);
  for (int q = 0; q < cfg.Q; ++q) {
    priors[q] = static_cast<int>(rng.index(rule_range(rule_for(q, cfg.d), cfg.K)));
  }
  return priors;
}

namespace detail {

// Rejection-samples N(0, I) features until the gold answer agrees (or
// disagrees) with the prior answer.
inline TaskItem make_item(const EnvConfig& cfg, const std::vector<int>& priors,
                          std::uint64_t item_id, bool agree, Rng& rng) {
  TaskItem item;
  item.item_id = item_id;
  const int q = static_cast<int>(rng.index(cfg.Q));
  const Rule rule = rule_for(q, cfg.d);
  item.observation.question_id = q;
  item.difficulty = rule.level;
  item.prior_answer = priors[q];
  std::vector<double> x(cfg.d);
  for (int attempt = 0;; ++attempt) {
    if (attempt > 100000) throw ConfigError("could not sample an item matching the prior constraint");
    for (double& v : x) v = rng.normal();
    const int gold = ground_truth(rule, x, cfg.K);
    if ((gold == item.prior_answer) == agree) {
      item.gold_answer = gold;
      break;
    }
  }
  item.observation.features = std::move(x);
  return item;
}

}  // namespace detail

/// Builds the three splits. The number of training items agreeing with their
/// prior answer is round(prior_strength * n_train), placed at shuffled
/// positions.
inline Dataset generate_dataset(const EnvConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.prior_answers = draw_prior_answers(cfg);

  Rng rng(derive_seed(cfg.seed, {0xda7au}));
  const auto n_agree = static_cast<std::size_t>(std::llround(cfg.prior_strength * cfg.n_train));
  std::vector<char> agree(cfg.n_train, 0);
  std::fill_n(agree.begin(), std::min<std::size_t>(n_agree, agree.size()), 1);
  std::shuffle(agree.begin(), agree.end(), rng.engine());

  std::uint64_t next_id = 0;
  for (int i = 0; i < cfg.n_train; ++i)
    ds.train.push_back(detail::make_item(cfg, ds.prior_answers, next_id++, agree[i] != 0, rng));
  for (int i = 0; i < cfg.n_eval_in_prior; ++i)
    ds.eval_in_prior.push_back(detail::make_item(cfg, ds.prior_answers, next_id++, true, rng));
  for (int i = 0; i < cfg.n_eval_anti_prior; ++i)
    ds.eval_anti_prior.push_back(detail::make_item(cfg, ds.prior_answers, next_id++, false, rng));
  return ds;
}

// ---------------------------------------------------------------------------
// Input corruption

struct PerturbationConfig {
  PerturbationKind kind = PerturbationKind::Diffusion;
  int diffusion_steps = 100;
  int schedule_length = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double mask_fraction = 0.5;
  double crop_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (schedule_length < 1) throw ConfigError("perturb.schedule_length must be >= 1");
    if (diffusion_steps < 0 || diffusion_steps > schedule_length)
      throw ConfigError("perturb.diffusion_steps must lie in [0, schedule_length]");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
      throw ConfigError("perturb beta schedule must satisfy 0 < beta_start <= beta_end < 1");
    if (!(mask_fraction >= 0.0 && mask_fraction <= 1.0))
      throw ConfigError("perturb.mask_fraction must lie in [0, 1]");
    if (!(crop_fraction >= 0.0 && crop_fraction <= 1.0))
      throw ConfigError("perturb.crop_fraction must lie in [0, 1]");
  }
};

/// beta_i of the linear schedule, i in [1, T].
inline double diffusion_beta(const PerturbationConfig& p, int i) {
  if (p.schedule_length == 1) return p.beta_start;
  return p.beta_start + (p.beta_end - p.beta_start) * static_cast<double>(i - 1) /
                            static_cast<double>(p.schedule_length - 1);
}

/// Cumulative product of (1 - beta_i) for i = 1..t; alpha_bar(0) = 1.
inline double alpha_bar(const PerturbationConfig& p, int t) {
  double a = 1.0;
  for (int i = 1; i <= t; ++i) a *= 1.0 - diffusion_beta(p, i);
  return a;
}

inline Observation perturb(const Observation& obs, const PerturbationConfig& pcfg, Rng& rng) {
  if (obs.corrupted) throw UsageError("perturb: observation is already corrupted");
  pcfg.validate();
  Observation out = obs;
  out.corrupted = true;
  CorruptionMeta meta;
  meta.kind = pcfg.kind;
  auto& x = out.features;
  const std::size_t d = x.size();

  switch (pcfg.kind) {
    case PerturbationKind::Diffusion: {
      meta.diffusion_steps = pcfg.diffusion_steps;
      if (pcfg.diffusion_steps == 0) break;
      const double ab = alpha_bar(pcfg, pcfg.diffusion_steps);
      const double signal = std::sqrt(ab), noise = std::sqrt(1.0 - ab);
      for (double& v : x) v = signal * v + noise * rng.normal();
      break;
    }
    case PerturbationKind::Mask: {
      meta.fraction = pcfg.mask_fraction;
      const auto n = static_cast<std::size_t>(std::llround(pcfg.mask_fraction * static_cast<double>(d)));
      std::vector<std::size_t> idx(d);
      for (std::size_t i = 0; i < d; ++i) idx[i] = i;
      // partial Fisher-Yates: first n entries are a uniform random subset
      for (std::size_t i = 0; i < n; ++i) {
        std::swap(idx[i], idx[i + rng.index(d - i)]);
        x[idx[i]] = 0.0;
      }
      break;
    }
    case PerturbationKind::Crop: {
      meta.fraction = pcfg.crop_fraction;
      const auto n = static_cast<std::size_t>(std::llround(pcfg.crop_fraction * static_cast<double>(d)));
      if (n == 0) break;
      const std::size_t start = rng.index(d - n + 1);
      std::fill_n(x.begin() + static_cast<std::ptrdiff_t>(start), n, 0.0);
      break;
    }
  }
  out.corruption = meta;
  return out;
}

inline Observation perturb(const Observation& obs, const PerturbationConfig& pcfg) {
  Rng rng(pcfg.seed);
  return perturb(obs, pcfg, rng);
}

}  // namespace capo
