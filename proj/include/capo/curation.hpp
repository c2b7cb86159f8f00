#pragma once

// Mixed-difficulty filtering of RL training items and the chain-of-thought
// cold start (rejection-sampled correct rollouts + maximum-likelihood update).

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/policy.hpp"
#include "capo/random.hpp"

namespace capo {

struct CurationConfig {
  int n_samples = 10;
  double temperature = 0.9;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_samples < 2) throw ConfigError("curation.n_samples must be >= 2");
    if (!(temperature > 0.0)) throw ConfigError("curation.temperature must be > 0");
  }
};

struct CurationReport {
  std::size_t input = 0;
  std::size_t kept = 0;
  std::size_t dropped_all_correct = 0;
  std::size_t dropped_all_incorrect = 0;
  std::map<int, std::size_t> input_by_level;  // keyed by difficulty level 1..3
  std::map<int, std::size_t> kept_by_level;
  std::vector<std::pair<std::uint64_t, double>> correct_rate;  // (item_id, rate), input order
};

inline nlohmann::json report_to_json(const CurationReport& r) {
  nlohmann::json j{{"input", r.input},
                   {"kept", r.kept},
                   {"dropped_all_correct", r.dropped_all_correct},
                   {"dropped_all_incorrect", r.dropped_all_incorrect}};
  for (const auto& [lvl, n] : r.input_by_level) j["input_by_level"][std::to_string(lvl)] = n;
  for (const auto& [lvl, n] : r.kept_by_level) j["kept_by_level"][std::to_string(lvl)] = n;
  j["correct_rate"] = nlohmann::json::array();
  for (const auto& [id, rate] : r.correct_rate) j["correct_rate"].push_back({{"item_id", id}, {"rate", rate}});
  return j;
}

/// Difficulty level of the rule family that generated the item.
inline Difficulty tag_difficulty(const TaskItem& item) {
  return rule_for(item.observation.question_id, static_cast<int>(item.observation.features.size())).level;
}

/// Number of correct answers among n samples; the stream is keyed by item id.
inline int count_correct(const PolicyParams& params, const TaskItem& item, int n, double temperature,
                         std::uint64_t seed) {
  Rng rng(derive_seed(seed, {item.item_id}));
  SamplingConfig scfg;
  scfg.temperature = temperature;
  int correct = 0;
  for (int j = 0; j < n; ++j) correct += sample_rollout(params, item.observation, scfg, rng).answer == item.gold_answer;
  return correct;
}

/// Keeps items whose sampled answers are neither all correct nor all wrong.
inline std::pair<std::vector<TaskItem>, CurationReport> mixed_difficulty_filter(
    const PolicyParams& params, const std::vector<TaskItem>& items, const CurationConfig& ccfg) {
  ccfg.validate();
  std::vector<TaskItem> kept;
  CurationReport rep;
  rep.input = items.size();
  for (const auto& item : items) {
    const int level = static_cast<int>(tag_difficulty(item));
    ++rep.input_by_level[level];
    const int c = count_correct(params, item, ccfg.n_samples, ccfg.temperature, ccfg.seed);
    rep.correct_rate.emplace_back(item.item_id, static_cast<double>(c) / ccfg.n_samples);
    if (c == ccfg.n_samples) {
      ++rep.dropped_all_correct;
    } else if (c == 0) {
      ++rep.dropped_all_incorrect;
    } else {
      ++rep.kept;
      ++rep.kept_by_level[level];
      kept.push_back(item);
    }
  }
  return {std::move(kept), std::move(rep)};
}

struct ColdStartConfig {
  int paths_per_item = 8;
  double temperature = 1.0;
  double hardness_threshold = 0.5;  // keep items with correct-rate <= threshold
  int sft_epochs = 20;
  double sft_learning_rate = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (paths_per_item < 1) throw ConfigError("coldstart.paths_per_item must be >= 1");
    if (!(hardness_threshold > 0.0 && hardness_threshold <= 1.0))
      throw ConfigError("coldstart.hardness_threshold must lie in (0, 1]");
    if (!(temperature > 0.0)) throw ConfigError("coldstart.temperature must be > 0");
    if (sft_epochs < 0) throw ConfigError("coldstart.sft_epochs must be >= 0");
    if (sft_learning_rate < 0.0) throw ConfigError("coldstart.sft_learning_rate must be >= 0");
  }
};

struct SftExample {
  Observation observation;
  Rollout rollout;
};

/// Samples reasoning paths per item, keeps the correct ones, and keeps only
/// items that are hard for the sampling policy (correct-rate <= threshold).
inline std::vector<SftExample> cold_start_collect(const PolicyParams& params,
                                                  const std::vector<TaskItem>& items,
                                                  const ColdStartConfig& cscfg) {
  cscfg.validate();
  std::vector<SftExample> corpus;
  SamplingConfig scfg;
  scfg.temperature = cscfg.temperature;
  for (const auto& item : items) {
    Rng rng(derive_seed(cscfg.seed, {item.item_id}));
    std::vector<Rollout> correct;
    for (int j = 0; j < cscfg.paths_per_item; ++j) {
      Rollout r = sample_rollout(params, item.observation, scfg, rng);
      r.item_id = item.item_id;
      if (r.answer == item.gold_answer) correct.push_back(std::move(r));
    }
    const double rate = static_cast<double>(correct.size()) / cscfg.paths_per_item;
    if (correct.empty() || rate > cscfg.hardness_threshold) continue;
    for (auto& r : correct) corpus.push_back({item.observation, std::move(r)});
  }
  return corpus;
}

inline double mean_log_likelihood(const PolicyParams& params, const std::vector<SftExample>& corpus) {
  double s = 0.0;
  for (const auto& ex : corpus) s += sequence_logprob(params, ex.observation, ex.rollout);
  return corpus.empty() ? 0.0 : s / static_cast<double>(corpus.size());
}

/// Full-batch gradient ascent on the mean sequence log-likelihood.
inline PolicyParams sft_update(const PolicyParams& params, const std::vector<SftExample>& corpus,
                               int epochs, double lr) {
  if (corpus.empty()) throw UsageError("sft_update: empty corpus");
  PolicyParams p = params;
  const double inv = 1.0 / static_cast<double>(corpus.size());
  for (int e = 0; e < epochs; ++e) {
    Gradient g(p.shape().size());
    for (const auto& ex : corpus) g += grad_logprob(p, ex.observation, ex.rollout);
    if (lr != 0.0) p.apply(g, lr * inv);
  }
  return p;
}

inline void write_corpus(const std::string& path, const std::vector<SftExample>& corpus) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& ex : corpus)
    out << nlohmann::json{{"item_id", ex.rollout.item_id},
                          {"reasoning", ex.rollout.reasoning},
                          {"answer", ex.rollout.answer}}
               .dump()
        << '\n';
}

/// Re-attaches corpus records to their observations. Records whose item id is
/// not in `items` are an error.
inline std::vector<SftExample> read_corpus(const std::string& path, const std::vector<TaskItem>& items) {
  std::unordered_map<std::uint64_t, const TaskItem*> by_id;
  for (const auto& it : items) by_id[it.item_id] = &it;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<SftExample> corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw IoError("malformed corpus record in " + path);
    const auto id = j.at("item_id").get<std::uint64_t>();
    auto it = by_id.find(id);
    if (it == by_id.end()) throw IoError("corpus item " + std::to_string(id) + " not in dataset");
    SftExample ex{it->second->observation, {}};
    ex.rollout.item_id = id;
    ex.rollout.reasoning = j.at("reasoning").get<std::vector<int>>();
    ex.rollout.answer = j.at("answer").get<int>();
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

}  // namespace capo
