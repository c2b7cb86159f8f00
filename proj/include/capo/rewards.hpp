#pragma once

#include <string>

#include "capo/errors.hpp"
#include "capo/judge.hpp"
#include "capo/policy.hpp"

namespace capo {

struct RewardConfig {
  double r_dar = 0.8;
  double r_cdr = 0.1;
  double r_pcr = 0.1;
  double tau_pcr = 0.3;

  void validate() const {
    if (r_dar < 0.0 || r_cdr < 0.0 || r_pcr < 0.0) throw ConfigError("reward magnitudes must be >= 0");
  }
};

struct RewardBreakdown {
  double pcr = 0.0;
  double cdr = 0.0;
  double dar = 0.0;
  double total = 0.0;
  JudgeSource judge_source = JudgeSource::None;

  friend bool operator==(const RewardBreakdown&, const RewardBreakdown&) = default;
};

inline bool answer_valid(const Rollout& r, int K) { return r.answer >= 0 && r.answer < K; }

/// Accuracy reward: r_dar when the answer matches gold.
inline double dar(const Rollout& r, int gold, const RewardConfig& cfg) {
  return r.answer == gold ? cfg.r_dar : 0.0;
}

/// Consistency reward: r_cdr when the judge deems the reasoning to support
/// the answer, regardless of correctness.
inline double cdr([[maybe_unused]] const Rollout& r, const JudgeVerdict& verdict, const RewardConfig& cfg) {
  return verdict.consistent ? cfg.r_cdr : 0.0;
}

/// Perceptual consistency reward: r_pcr when the accuracy reward on the
/// original input beats the one on the corrupted input by more than tau.
inline double pcr(double dar_original, double dar_corrupted, const RewardConfig& cfg) {
  return dar_original - dar_corrupted > cfg.tau_pcr ? cfg.r_pcr : 0.0;
}

/// Aggregate reward of an original-input rollout. `verdict` is absent when the
/// consistency term is disabled; `paired_corrupted_dar` is absent when the
/// perceptual term is disabled. Rollouts without a valid answer score zero.
inline RewardBreakdown capo_total(const Rollout& r, int gold, int K, const JudgeVerdict* verdict,
                                  const double* paired_corrupted_dar, const RewardConfig& cfg) {
  RewardBreakdown b;
  if (!answer_valid(r, K)) return b;
  b.dar = dar(r, gold, cfg);
  if (verdict) {
    b.cdr = cdr(r, *verdict, cfg);
    b.judge_source = verdict->source;
  }
  if (paired_corrupted_dar) b.pcr = pcr(b.dar, *paired_corrupted_dar, cfg);
  b.total = b.pcr + b.cdr + b.dar;
  return b;
}

}  // namespace capo
