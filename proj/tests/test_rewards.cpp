#include <gtest/gtest.h>

#include <set>

#include "capo/rewards.hpp"

using namespace capo;

namespace {

Rollout answered(int a) {
  Rollout r;
  r.answer = a;
  return r;
}

JudgeVerdict verdict(bool consistent) { return JudgeVerdict{consistent, JudgeSource::Rule, std::nullopt}; }

}  // namespace

TEST(Rewards, AccuracyComponent) {
  const RewardConfig cfg;
  EXPECT_EQ(dar(answered(2), 2, cfg), 0.8);
  EXPECT_EQ(dar(answered(1), 2, cfg), 0.0);
  RewardConfig zero;
  zero.r_dar = 0.0;
  EXPECT_EQ(dar(answered(2), 2, zero), 0.0);
  EXPECT_EQ(dar(answered(1), 2, zero), 0.0);
}

TEST(Rewards, ConsistencyComponentIgnoresCorrectness) {
  const RewardConfig cfg;
  EXPECT_EQ(cdr(answered(0), verdict(true), cfg), 0.1);
  EXPECT_EQ(cdr(answered(0), verdict(false), cfg), 0.0);
  const auto v = verdict(true);
  const auto b = capo_total(answered(1), 2, 3, &v, nullptr, cfg);
  EXPECT_EQ(b.dar, 0.0);
  EXPECT_EQ(b.cdr, 0.1);
}

TEST(Rewards, PerceptualComponent) {
  const RewardConfig cfg;
  EXPECT_EQ(pcr(0.8, 0.0, cfg), 0.1);
  EXPECT_EQ(pcr(0.8, 0.8, cfg), 0.0);
  EXPECT_EQ(pcr(0.0, 0.8, cfg), 0.0);
  EXPECT_EQ(pcr(0.0, 0.0, cfg), 0.0);
  RewardConfig edge;
  edge.tau_pcr = 0.8;  // strict inequality
  EXPECT_EQ(pcr(0.8, 0.0, edge), 0.0);
}

TEST(Rewards, TotalExamples) {
  const RewardConfig cfg;
  const auto yes = verdict(true), no = verdict(false);
  const double robust = 0.0, sensitive = 0.0, corr_right = 0.8;
  auto b = capo_total(answered(1), 1, 3, &yes, &sensitive, cfg);
  EXPECT_EQ(b.dar, 0.8);
  EXPECT_EQ(b.cdr, 0.1);
  EXPECT_EQ(b.pcr, 0.1);
  EXPECT_EQ(b.total, 0.8 + 0.1 + 0.1);
  EXPECT_NEAR(b.total, 1.0, 1e-15);
  b = capo_total(answered(0), 1, 3, &no, &robust, cfg);
  EXPECT_EQ(b.total, 0.0);
  b = capo_total(answered(0), 1, 3, &yes, &corr_right, cfg);
  EXPECT_EQ(b.total, 0.1);
  EXPECT_EQ(b.judge_source, JudgeSource::Rule);
}

TEST(Rewards, ExhaustiveTruthTable) {
  const RewardConfig cfg;
  std::set<double> totals;
  for (bool correct : {false, true})
    for (bool consistent : {false, true})
      for (bool corr_correct : {false, true}) {
        const int gold = 1;
        const auto v = verdict(consistent);
        const double cd = corr_correct ? cfg.r_dar : 0.0;
        const auto b = capo_total(answered(correct ? gold : 0), gold, 3, &v, &cd, cfg);
        const double want_dar = correct ? 0.8 : 0.0;
        const double want_cdr = consistent ? 0.1 : 0.0;
        const double want_pcr = (correct && !corr_correct) ? 0.1 : 0.0;
        EXPECT_EQ(b.dar, want_dar);
        EXPECT_EQ(b.cdr, want_cdr);
        EXPECT_EQ(b.pcr, want_pcr);
        EXPECT_EQ(b.total, want_pcr + want_cdr + want_dar);
        totals.insert(b.total);
      }
  for (double t : totals) {
    bool reachable = false;
    for (double s : {0.0, 0.1, 0.2, 0.8, 0.9, 1.0}) reachable |= std::abs(t - s) < 1e-12;
    EXPECT_TRUE(reachable) << t;
  }
}

TEST(Rewards, InvalidAnswerScoresZero) {
  const RewardConfig cfg;
  const auto yes = verdict(true);
  const double cd = 0.0;
  for (int a : {-1, 3, 99}) {
    const auto b = capo_total(answered(a), 1, 3, &yes, &cd, cfg);
    EXPECT_EQ(b, RewardBreakdown{});
  }
}

TEST(Rewards, DisabledComponentsStayZero) {
  const RewardConfig cfg;
  const auto b = capo_total(answered(1), 1, 3, nullptr, nullptr, cfg);
  EXPECT_EQ(b.cdr, 0.0);
  EXPECT_EQ(b.pcr, 0.0);
  EXPECT_EQ(b.total, 0.8);
  EXPECT_EQ(b.judge_source, JudgeSource::None);
}

TEST(Rewards, HomogeneousUnderCommonRescaling) {
  const RewardConfig base;
  for (double k : {0.5, 2.0, 10.0}) {
    RewardConfig scaled{base.r_dar * k, base.r_cdr * k, base.r_pcr * k, base.tau_pcr * k};
    for (bool correct : {false, true})
      for (bool consistent : {false, true})
        for (bool corr_correct : {false, true}) {
          const auto v = verdict(consistent);
          const double cd0 = corr_correct ? base.r_dar : 0.0, cd1 = corr_correct ? scaled.r_dar : 0.0;
          const auto b0 = capo_total(answered(correct ? 1 : 0), 1, 3, &v, &cd0, base);
          const auto b1 = capo_total(answered(correct ? 1 : 0), 1, 3, &v, &cd1, scaled);
          EXPECT_NEAR(b1.total, k * b0.total, 1e-12);
        }
  }
}

TEST(Rewards, NegativeMagnitudeIsConfigError) {
  RewardConfig cfg;
  cfg.r_cdr = -0.1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
