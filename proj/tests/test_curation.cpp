#include <gtest/gtest.h>

#include <filesystem>

#include "capo/config.hpp"
#include "capo/curation.hpp"
#include "capo/eval.hpp"
#include "test_util.hpp"

using namespace capo;
using namespace capo::testing;

namespace {

CurationConfig filter_config() {
  CurationConfig c;
  c.n_samples = 40;
  c.seed = 8;
  return c;
}

}  // namespace

TEST(Filter, KeepsExactlyMixedItems) {
  const auto rc = rigged_filter_case();
  const auto [kept, rep] = mixed_difficulty_filter(rc.policy, rc.items, filter_config());
  std::vector<std::uint64_t> ids;
  for (const auto& it : kept) ids.push_back(it.item_id);
  EXPECT_EQ(ids, rc.mixed_ids);
  EXPECT_EQ(rep.input, rc.items.size());
  EXPECT_EQ(rep.kept + rep.dropped_all_correct + rep.dropped_all_incorrect, rep.input);
  EXPECT_EQ(rep.dropped_all_correct, rc.all_correct);
  EXPECT_EQ(rep.dropped_all_incorrect, rc.all_wrong);
  ASSERT_EQ(rep.correct_rate.size(), rc.items.size());
  for (std::size_t i = 0; i < rc.items.size(); ++i) {
    EXPECT_EQ(rep.correct_rate[i].first, rc.items[i].item_id);
    const double rate = rep.correct_rate[i].second;
    const double want_lo = i % 3 == 0 ? 1.0 : 0.0, want_hi = i % 3 == 1 ? 0.0 : 1.0;
    if (i % 3 == 2) {
      EXPECT_TRUE(rate > 0.0 && rate < 1.0);
    } else {
      EXPECT_TRUE(rate >= want_lo && rate <= want_hi) << rate;
    }
  }
  std::size_t by_level = 0;
  for (const auto& [lvl, n] : rep.kept_by_level) by_level += n;
  EXPECT_EQ(by_level, rep.kept);
  EXPECT_EQ(rep.kept_by_level.at(3), rep.kept);
  const auto j = report_to_json(rep);
  EXPECT_EQ(j["kept"], rep.kept);
}

TEST(Filter, EmptyInputGivesEmptyReport) {
  const auto rc = rigged_filter_case();
  const auto [kept, rep] = mixed_difficulty_filter(rc.policy, {}, filter_config());
  EXPECT_TRUE(kept.empty());
  EXPECT_EQ(rep.input, 0u);
  EXPECT_EQ(rep.kept, 0u);
}

TEST(Filter, DeterministicGivenSeed) {
  RunConfig c;
  const auto ds = generate_dataset(c.effective_env());
  const std::vector<TaskItem> items(ds.train.begin(), ds.train.begin() + 100);
  const auto p = make_policy(c.policy_shape(), 0.5, 1.0, 4);
  CurationConfig cc;
  cc.seed = 5;
  const auto a = mixed_difficulty_filter(p, items, cc), b = mixed_difficulty_filter(p, items, cc);
  EXPECT_EQ(a.second.correct_rate, b.second.correct_rate);
  EXPECT_EQ(a.first.size(), b.first.size());
}

TEST(Filter, NearGreedySamplingDropsEverything) {
  RunConfig c;
  const auto ds = generate_dataset(c.effective_env());
  const std::vector<TaskItem> items(ds.train.begin(), ds.train.begin() + 200);
  const auto p = make_policy(c.policy_shape(), 0.5, 1.0, 4);
  CurationConfig cc;
  cc.temperature = 1e-9;
  const auto [kept, rep] = mixed_difficulty_filter(p, items, cc);
  EXPECT_TRUE(kept.empty());
  EXPECT_EQ(rep.dropped_all_correct + rep.dropped_all_incorrect, items.size());
}

TEST(Filter, InvalidConfig) {
  CurationConfig cc;
  cc.n_samples = 1;
  EXPECT_THROW(cc.validate(), ConfigError);
  cc.n_samples = 10;
  cc.temperature = 0.0;
  EXPECT_THROW(cc.validate(), ConfigError);
}

TEST(Difficulty, TagFollowsRuleFamily) {
  EnvConfig e;
  const auto ds = generate_dataset(e);
  for (const auto& it : ds.train) {
    const auto lvl = tag_difficulty(it);
    EXPECT_EQ(lvl, it.difficulty);
    EXPECT_EQ(static_cast<int>(lvl), it.observation.question_id % 3 + 1);
  }
  TaskItem single, pairwise, parity;
  single.observation = {std::vector<double>(5, 0.0), 0};
  pairwise.observation = {std::vector<double>(5, 0.0), 1};
  parity.observation = {std::vector<double>(5, 0.0), 2};
  EXPECT_EQ(tag_difficulty(single), Difficulty::Level1);
  EXPECT_EQ(tag_difficulty(pairwise), Difficulty::Level2);
  EXPECT_EQ(tag_difficulty(parity), Difficulty::Level3);
}

TEST(ColdStart, KeepsOnlyCorrectPathsOfHardItems) {
  const auto rc = rigged_filter_case(90);
  ColdStartConfig cs;
  cs.paths_per_item = 8;
  cs.seed = 3;
  const auto corpus = cold_start_collect(rc.policy, rc.items, cs);
  ASSERT_FALSE(corpus.empty());
  std::map<std::uint64_t, int> per_item;
  for (const auto& ex : corpus) {
    const auto it = std::find_if(rc.items.begin(), rc.items.end(),
                                 [&](const TaskItem& t) { return t.item_id == ex.rollout.item_id; });
    ASSERT_NE(it, rc.items.end());
    EXPECT_EQ(ex.rollout.answer, it->gold_answer);
    EXPECT_EQ(ex.observation.question_id, 2);  // q0 too easy, q1 never correct
    ++per_item[ex.rollout.item_id];
  }
  for (const auto& [id, n] : per_item) EXPECT_LE(n, 4) << id;  // correct-rate <= 0.5
}

TEST(Sft, ZeroLearningRateIsNoOp) {
  const auto rc = rigged_filter_case();
  const auto corpus = cold_start_collect(rc.policy, rc.items, ColdStartConfig{});
  ASSERT_FALSE(corpus.empty());
  EXPECT_TRUE(sft_update(rc.policy, corpus, 5, 0.0) == rc.policy);
  EXPECT_THROW(sft_update(rc.policy, {}, 1, 0.1), UsageError);
}

TEST(Sft, SinglePairLikelihoodIncreasesEveryEpoch) {
  const auto shape = small_shape(2);
  PolicyParams p = random_policy(shape, 2);
  const auto obs = random_observation(shape, 3);
  SamplingConfig scfg;
  scfg.seed = 4;
  const std::vector<SftExample> corpus{{obs, sample_rollout(p, obs, scfg)}};
  double prev = mean_log_likelihood(p, corpus);
  for (int e = 0; e < 30; ++e) {
    p = sft_update(p, corpus, 1, 0.2);
    const double now = mean_log_likelihood(p, corpus);
    EXPECT_GT(now, prev) << "epoch " << e;
    prev = now;
  }
}

TEST(Sft, WarmStartDoesNotHurtCorpusAccuracy) {
  RunConfig c;
  const auto ds = generate_dataset(c.effective_env());
  const auto p = make_policy(c.policy_shape(), c.policy.init_scale, c.policy.init_consistency, 6);
  ColdStartConfig cs;
  cs.seed = 6;
  const auto corpus = cold_start_collect(p, ds.train, cs);
  ASSERT_FALSE(corpus.empty());
  const auto q = sft_update(p, corpus, cs.sft_epochs, cs.sft_learning_rate);
  EXPECT_GT(mean_log_likelihood(q, corpus), mean_log_likelihood(p, corpus));
  std::set<std::uint64_t> ids;
  for (const auto& ex : corpus) ids.insert(ex.rollout.item_id);
  std::vector<TaskItem> items;
  for (const auto& it : ds.train)
    if (ids.count(it.item_id)) items.push_back(it);
  auto greedy_acc = [&](const PolicyParams& params) {
    int ok = 0;
    for (const auto& it : items) ok += greedy_rollout(params, it.observation).answer == it.gold_answer;
    return static_cast<double>(ok) / items.size();
  };
  EXPECT_GE(greedy_acc(q), greedy_acc(p));
}

TEST(Sft, CorpusFileRoundTrip) {
  const auto rc = rigged_filter_case();
  const auto corpus = cold_start_collect(rc.policy, rc.items, ColdStartConfig{});
  const auto path = (std::filesystem::temp_directory_path() / "capo_corpus_test.jsonl").string();
  write_corpus(path, corpus);
  const auto back = read_corpus(path, rc.items);
  ASSERT_EQ(back.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(back[i].rollout.reasoning, corpus[i].rollout.reasoning);
    EXPECT_EQ(back[i].rollout.answer, corpus[i].rollout.answer);
    EXPECT_EQ(back[i].observation.features, corpus[i].observation.features);
  }
  EXPECT_THROW(read_corpus(path, {}), IoError);
  std::filesystem::remove(path);
}
