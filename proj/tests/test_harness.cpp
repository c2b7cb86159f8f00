#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "capo/harness.hpp"
#include "test_util.hpp"

using namespace capo;
using namespace capo::testing;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_base() {
  RunConfig c;
  c.env.n_train = 48;
  c.env.n_eval_in_prior = 30;
  c.env.n_eval_anti_prior = 30;
  c.optim.batch_size = 4;
  c.eval.n_samples = 4;
  c.eval.k_values = {1, 4};
  c.run.steps = 3;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("capo_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) rows.push_back(split_csv_line(line));
  return rows;
}

}  // namespace

TEST(PassAtK, Examples) {
  EXPECT_EQ(pass_at_k(10, 0, 5), 0.0);
  EXPECT_EQ(pass_at_k(10, 10, 1), 1.0);
  EXPECT_EQ(pass_at_k(4, 1, 2), 0.5);
  EXPECT_TRUE(pass_at_k_exact(4, 1, 2) == (Rational{1, 2}));
  EXPECT_THROW(pass_at_k(4, 1, 5), UsageError);
  EXPECT_THROW(pass_at_k(4, 5, 2), UsageError);
  EXPECT_THROW(pass_at_k(4, -1, 2), UsageError);
  EXPECT_THROW(pass_at_k(4, 1, 0), UsageError);
}

TEST(PassAtK, MatchesSubsetEnumeration) {
  for (int n = 1; n <= 12; ++n)
    for (int c = 0; c <= n; ++c)
      for (int k = 1; k <= n; ++k) {
        const auto [hit, total] = enumerate_pass_at_k(n, c, k);
        EXPECT_TRUE(pass_at_k_exact(n, c, k) == (Rational{hit, total})) << n << ' ' << c << ' ' << k;
      }
}

TEST(PassAtK, MonotoneInKAndIndicatorAtN) {
  for (int n : {1, 5, 10, 40, 62, 63, 100, 500})
    for (int c = 0; c <= n; c += std::max(1, n / 7)) {
      double prev = -1.0;
      for (int k = 1; k <= n; ++k) {
        const double v = pass_at_k(n, c, k);
        EXPECT_GE(v, prev - 1e-15);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        prev = v;
      }
      EXPECT_EQ(pass_at_k(n, c, n), c > 0 ? 1.0 : 0.0);
    }
}

TEST(PassAtK, LogSpaceAgreesWithDirectProduct) {
  for (int c : {1, 10, 50, 99})
    for (int k : {1, 2, 10, 50}) {
      double ratio = 1.0;
      for (int i = 0; i < k; ++i) ratio *= static_cast<double>(100 - c - i) / (100 - i);
      EXPECT_NEAR(pass_at_k(100, c, k), 1.0 - std::max(0.0, ratio), 1e-12);
    }
}

TEST(Evaluate, AlwaysGoldPolicyIsPerfect) {
  auto rc = rigged_filter_case();
  std::vector<TaskItem> items;
  for (auto& it : rc.items)
    if (it.observation.question_id == 0) items.push_back(it);
  EvalConfig e;
  const auto r = evaluate(rc.policy, items, e);
  EXPECT_EQ(r.greedy_accuracy, 1.0);
  for (const auto& [k, v] : r.pass_at) EXPECT_EQ(v, 1.0) << k;
  EXPECT_EQ(r.mean_response_length, 1.0);
  EXPECT_THROW(evaluate(rc.policy, {}, e), UsageError);
}

TEST(Evaluate, UniformPolicyGreedyAccuracyIsOneOverK) {
  PolicyShape s;
  s.d = 3;
  s.Q = 1;
  s.K = 4;
  s.fillers = 1;
  s.L = 2;
  const PolicyParams uniform(s);
  Rng rng(12);
  std::vector<TaskItem> items(4000);
  for (std::size_t i = 0; i < items.size(); ++i) {
    items[i].item_id = i;
    items[i].observation = {{rng.normal(), rng.normal(), rng.normal()}, 0};
    items[i].gold_answer = static_cast<int>(rng.index(4));
  }
  EvalConfig e;
  e.n_samples = 4;
  e.k_values = {1, 4};
  const auto r = evaluate(uniform, items, e);
  const double sigma = std::sqrt(0.25 * 0.75 / items.size());
  EXPECT_NEAR(r.greedy_accuracy, 0.25, 3.0 * sigma);
  EXPECT_NEAR(r.pass_at.at(1), 0.25, 3.0 * sigma);
  EXPECT_NEAR(r.pass_at.at(4), 1.0 - std::pow(0.75, 4), 3.0 * std::sqrt(0.7 * 0.3 / items.size()));
}

TEST(Evaluate, PassAtOneIsMeanCorrectRate) {
  RunConfig c;
  const auto ds = generate_dataset(c.effective_env());
  const auto p = make_policy(c.policy_shape(), 0.5, 1.0, 3);
  EvalConfig e;
  e.seed = 21;
  const std::vector<TaskItem> items(ds.train.begin(), ds.train.begin() + 200);
  const auto r = evaluate(p, items, e);
  double rate = 0.0;
  SamplingConfig scfg;
  for (const auto& it : items) {
    Rng rng(derive_seed(e.seed, {0xe7a1, it.item_id}));
    int ok = 0;
    for (int j = 0; j < e.n_samples; ++j) ok += sample_rollout(p, it.observation, scfg, rng).answer == it.gold_answer;
    rate += static_cast<double>(ok) / e.n_samples;
  }
  EXPECT_NEAR(r.pass_at.at(1), rate / items.size(), 1e-12);
  EXPECT_LE(r.pass_at.at(1), r.pass_at.at(5));
  EXPECT_LE(r.pass_at.at(5), r.pass_at.at(10));
}

TEST(Evaluate, DeterministicAndGreedySeedIndependent) {
  RunConfig c;
  const auto ds = generate_dataset(c.effective_env());
  const auto p = make_policy(c.policy_shape(), 0.5, 1.0, 3);
  EvalConfig e;
  const auto a = evaluate(p, ds.eval_anti_prior, e);
  const auto b = evaluate(p, ds.eval_anti_prior, e);
  EXPECT_EQ(to_json(a), to_json(b));
  e.seed = 99;
  const auto d = evaluate(p, ds.eval_anti_prior, e);
  EXPECT_EQ(a.greedy_accuracy, d.greedy_accuracy);
  EXPECT_EQ(a.anti_prior_accuracy, a.greedy_accuracy);
  EXPECT_EQ(a.n_anti_prior, ds.eval_anti_prior.size());
}

TEST(Preset, EveryNamedPresetChangesOnlyItsFactor) {
  const RunConfig base = tiny_base();
  for (const auto& name : preset_names()) {
    const auto p = make_preset(name, base, {0, 1});
    EXPECT_GE(p.levels.size(), 2u) << name;
    for (const auto& lvl : p.levels)
      for (const auto& key : config_diff(base, lvl.config))
        EXPECT_NE(std::find(p.factor_keys.begin(), p.factor_keys.end(), key), p.factor_keys.end())
            << name << " " << lvl.label << " " << key;
  }
  EXPECT_EQ(make_preset("components", base, {0}).levels.size(), 4u);
  EXPECT_EQ(make_preset("noise", base, {0}).levels.size(), 3u);
  EXPECT_THROW(make_preset("nope", base, {0}), ConfigError);
  EXPECT_THROW(make_preset("noise", base, {}), ConfigError);
}

TEST(Preset, OffFactorChangeIsRejected) {
  auto p = make_preset("noise", tiny_base(), {0});
  p.levels[1].config.optim.learning_rate = 0.1;
  EXPECT_THROW(validate_preset(p), ConfigError);
}

TEST(Preset, SingleConfigSingleSeedGivesOneRow) {
  const auto dir = fresh_dir("single");
  ExperimentPreset p;
  p.name = "single";
  p.factor = "algorithm";
  p.factor_keys = {"/optim/algorithm"};
  p.base = tiny_base();
  p.levels = {{"capo", p.base}};
  p.seeds = {3};
  const auto o = run_preset(p, dir.string());
  ASSERT_EQ(o.summary.size(), 1u);
  EXPECT_EQ(o.summary[0].n_completed, 1u);
  const auto csv = read_csv(dir / "summary.csv");
  ASSERT_EQ(csv.size(), 2u);
  EXPECT_EQ(csv[0][0], "algorithm");
  EXPECT_TRUE(fs::exists(dir / "capo" / "seed_3" / "metrics.csv"));
  fs::remove_all(dir);
}

TEST(Preset, ComponentsPresetPopulatesFourRows) {
  const auto dir = fresh_dir("components");
  const auto p = make_preset("components", tiny_base(), {0, 1});
  const auto o = run_preset(p, dir.string(), 2);
  ASSERT_EQ(o.summary.size(), 4u);
  const auto csv = read_csv(dir / "summary.csv");
  ASSERT_EQ(csv.size(), 5u);
  for (std::size_t r = 1; r < csv.size(); ++r) {
    ASSERT_EQ(csv[r].size(), csv[0].size());
    for (const auto& cell : csv[r]) EXPECT_FALSE(cell.empty());
    EXPECT_EQ(csv[r][2], "2");
  }
  EXPECT_EQ(read_csv(dir / "runs.csv").size(), 9u);
  fs::remove_all(dir);
}

TEST(Preset, NoisePresetRowsDifferOnlyThroughCorruption) {
  const auto p = make_preset("noise", tiny_base(), {4});
  for (const auto& lvl : p.levels) {
    auto c = lvl.config;
    c.perturb.kind = p.base.perturb.kind;
    EXPECT_TRUE(config_diff(p.base, c).empty()) << lvl.label;
  }
}

TEST(Preset, FailedRunIsRecordedAndSummaryStillWritten) {
  const auto dir = fresh_dir("failure");
  fs::create_directories(dir);
  std::ofstream(dir / "broken") << "not a directory";
  ExperimentPreset p;
  p.name = "failure";
  p.factor = "algorithm";
  p.factor_keys = {"/optim/algorithm"};
  p.base = tiny_base();
  RunConfig grpo = p.base;
  grpo.optim.algorithm = Algorithm::GRPO_DAR_only;
  p.levels = {{"capo", p.base}, {"broken", grpo}};
  p.seeds = {0};
  const auto o = run_preset(p, dir.string());
  ASSERT_EQ(o.runs.size(), 2u);
  EXPECT_TRUE(o.runs[0].ok);
  EXPECT_FALSE(o.runs[1].ok);
  EXPECT_FALSE(o.runs[1].error.empty());
  EXPECT_EQ(o.summary[1].n_completed, 0u);
  const auto runs = read_csv(dir / "runs.csv");
  EXPECT_EQ(runs[2][2], "failed");
  EXPECT_EQ(read_csv(dir / "summary.csv").size(), 3u);
  fs::remove_all(dir);
}

TEST(Stats, MeanStd) {
  EXPECT_EQ(mean_std({2.0}), (std::pair{2.0, 0.0}));
  const auto [m, s] = mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_NEAR(s, std::sqrt(5.0 / 3.0), 1e-15);
}

TEST(Report, MergesRunsSortedByRunAndStep) {
  const auto dir = fresh_dir("report");
  fs::create_directories(dir);
  auto write = [&](const std::string& name, int steps) {
    std::ofstream out(dir / name);
    out << metrics_header() << '\n';
    for (int s = steps; s >= 1; --s) {  // out of order on purpose
      TrainStats st;
      st.step = s;
      st.mean_reward = 0.01 * s;
      out << metrics_row(st) << '\n';
    }
  };
  write("b.csv", 100);
  write("a.csv", 100);
  const auto rows = merge_metrics({{"b", (dir / "b.csv").string()}, {"a", (dir / "a.csv").string()}});
  EXPECT_EQ(rows.size(), 200u * report_series().size());
  std::map<std::string, int> per_series;
  for (const auto& r : rows) ++per_series[r.series];
  for (const auto& s : report_series()) EXPECT_EQ(per_series[s], 200) << s;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& x = rows[i - 1];
    const auto& y = rows[i];
    EXPECT_TRUE(x.run < y.run || (x.run == y.run && x.step <= y.step));
  }
  EXPECT_EQ(rows.front().run, "a");
  EXPECT_EQ(rows.front().step, 1u);

  report({{"a", (dir / "a.csv").string()}}, (dir / "long.csv").string());
  const auto csv = read_csv(dir / "long.csv");
  EXPECT_EQ(csv[0], (std::vector<std::string>{"run", "step", "series", "value"}));
  EXPECT_EQ(csv.size(), 1 + 100 * report_series().size());
  fs::remove_all(dir);
}

TEST(Report, MissingColumnNamesFileAndColumn) {
  const auto dir = fresh_dir("report_bad");
  fs::create_directories(dir);
  const auto path = (dir / "bad.csv").string();
  std::ofstream(path) << "step,mean_reward,mean_response_length,mean_dar,mean_cdr,mean_pcr\n1,0,0,0,0,0\n";
  try {
    merge_metrics({{"x", path}});
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(path), std::string::npos);
    EXPECT_NE(msg.find("'kl'"), std::string::npos);
  }
  fs::remove_all(dir);
}
