#pragma once

// Run configuration, read from a JSON file with one object per section:
//
//   {"env": {...}, "policy": {...}, "perturb": {...}, "reward": {...},
//    "optim": {...}, "judge": {...}, "curation": {...}, "coldstart": {...},
//    "eval": {...}, "run": {"seed": 0, "steps": 500, "out_dir": "runs/x"}}
//
// Missing keys keep their defaults; unknown keys are rejected so typos do not
// silently fall back to defaults.

#include <cstdint>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "capo/curation.hpp"
#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/eval.hpp"
#include "capo/optimizer.hpp"
#include "capo/policy.hpp"
#include "capo/remote_judge.hpp"
#include "capo/rewards.hpp"

namespace capo {

struct PolicyConfig {
  int fillers = 0;
  int L = 1;
  bool stop_token = false;
  bool answer_features = false;
  double input_gain = 4.0;
  double init_scale = 0.1;
  double init_consistency = 2.0;
};

enum class JudgeKind { Rule, Remote };

struct JudgeConfig {
  JudgeKind kind = JudgeKind::Rule;
  RemoteJudgeConfig remote;
};

struct RunSection {
  std::uint64_t seed = 0;
  int steps = 500;
  std::string out_dir = "runs/default";
  int checkpoint_every = 0;  // 0: initial and final checkpoints only
  int threads = 1;           // > 1 builds groups concurrently
  bool curate = false;       // mixed-difficulty filter on the training split
  bool cold_start = false;   // SFT warm start before RL
};

struct RunConfig {
  EnvConfig env;
  bool env_seed_set = false;  // otherwise env.seed follows run.seed
  PolicyConfig policy;
  PerturbationConfig perturb;
  RewardConfig reward;
  OptimConfig optim;
  JudgeConfig judge;
  CurationConfig curation;
  ColdStartConfig coldstart;
  EvalConfig eval;
  RunSection run;

  PolicyShape policy_shape() const {
    return PolicyShape{env.d, env.Q, env.K, policy.fillers, policy.L, policy.stop_token, policy.answer_features,
                       policy.input_gain};
  }

  /// Env config with the effective dataset seed.
  EnvConfig effective_env() const {
    EnvConfig e = env;
    if (!env_seed_set) e.seed = run.seed;
    return e;
  }

  void validate() const {
    env.validate();
    policy_shape().validate();
    perturb.validate();
    reward.validate();
    optim.validate();
    curation.validate();
    coldstart.validate();
    eval.validate();
    if (judge.kind == JudgeKind::Remote) judge.remote.validate();
    if (run.steps < 0) throw ConfigError("run.steps must be >= 0");
    if (run.checkpoint_every < 0) throw ConfigError("run.checkpoint_every must be >= 0");
    if (run.threads < 1) throw ConfigError("run.threads must be >= 1");
    if (run.out_dir.empty()) throw ConfigError("run.out_dir must be non-empty");
  }
};

namespace detail {

class Section {
 public:
  Section(const nlohmann::json& root, const std::string& name) : name_(name) {
    if (root.contains(name)) {
      obj_ = root.at(name);
      if (!obj_.is_object()) throw ConfigError("section '" + name + "' must be an object");
    }
  }

  template <class T>
  void read(const char* key, T& dst) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      dst = obj_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) const { return obj_.contains(key); }

  void finish() const {
    if (!obj_.is_object()) return;
    for (const auto& [k, v] : obj_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key " + name_ + "." + k);
  }

 private:
  std::string name_;
  nlohmann::json obj_ = nlohmann::json::object();
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& root) {
  if (!root.is_object()) throw ConfigError("config root must be an object");
  static const std::set<std::string> sections{"env", "policy", "perturb", "reward", "optim", "judge",
                                              "curation", "coldstart", "eval", "run"};
  for (const auto& [k, v] : root.items())
    if (!sections.count(k)) throw ConfigError("unknown config section '" + k + "'");

  RunConfig c;
  {
    detail::Section s(root, "env");
    s.read("d", c.env.d);
    s.read("Q", c.env.Q);
    s.read("K", c.env.K);
    s.read("prior_strength", c.env.prior_strength);
    s.read("n_train", c.env.n_train);
    s.read("n_eval_in_prior", c.env.n_eval_in_prior);
    s.read("n_eval_anti_prior", c.env.n_eval_anti_prior);
    c.env_seed_set = s.has("seed");
    s.read("seed", c.env.seed);
    s.finish();
  }
  {
    detail::Section s(root, "policy");
    s.read("fillers", c.policy.fillers);
    s.read("L", c.policy.L);
    s.read("stop_token", c.policy.stop_token);
    s.read("answer_features", c.policy.answer_features);
    s.read("input_gain", c.policy.input_gain);
    s.read("init_scale", c.policy.init_scale);
    s.read("init_consistency", c.policy.init_consistency);
    s.finish();
  }
  {
    detail::Section s(root, "perturb");
    std::string kind = to_string(c.perturb.kind);
    s.read("kind", kind);
    c.perturb.kind = perturbation_kind_from_string(kind);
    s.read("diffusion_steps", c.perturb.diffusion_steps);
    s.read("schedule_length", c.perturb.schedule_length);
    s.read("beta_start", c.perturb.beta_start);
    s.read("beta_end", c.perturb.beta_end);
    s.read("mask_fraction", c.perturb.mask_fraction);
    s.read("crop_fraction", c.perturb.crop_fraction);
    s.finish();
  }
  {
    detail::Section s(root, "reward");
    s.read("dar", c.reward.r_dar);
    s.read("cdr", c.reward.r_cdr);
    s.read("pcr", c.reward.r_pcr);
    s.read("tau_pcr", c.reward.tau_pcr);
    s.finish();
  }
  {
    detail::Section s(root, "optim");
    s.read("G", c.optim.G);
    s.read("clip_eps", c.optim.clip_eps);
    s.read("kl_beta", c.optim.kl_beta);
    s.read("entropy_coef", c.optim.entropy_coef);
    s.read("delta", c.optim.delta);
    s.read("learning_rate", c.optim.learning_rate);
    s.read("batch_size", c.optim.batch_size);
    s.read("inner_epochs", c.optim.inner_epochs);
    s.read("temperature", c.optim.temperature);
    std::string algo = to_string(c.optim.algorithm);
    s.read("algorithm", algo);
    c.optim.algorithm = algorithm_from_string(algo);
    s.finish();
  }
  {
    detail::Section s(root, "judge");
    std::string kind = "rule";
    s.read("kind", kind);
    if (kind == "rule") c.judge.kind = JudgeKind::Rule;
    else if (kind == "remote") c.judge.kind = JudgeKind::Remote;
    else throw ConfigError("judge.kind must be 'rule' or 'remote'");
    auto& r = c.judge.remote;
    s.read("url", r.url);
    s.read("path", r.path);
    s.read("model", r.model);
    s.read("token_env", r.token_env);
    s.read("attempt_timeout_s", r.attempt_timeout_s);
    s.read("total_timeout_s", r.total_timeout_s);
    s.read("attempts", r.attempts);
    s.read("backoff_initial_s", r.backoff_initial_s);
    s.read("max_in_flight", r.max_in_flight);
    s.finish();
  }
  {
    detail::Section s(root, "curation");
    s.read("n_samples", c.curation.n_samples);
    s.read("temperature", c.curation.temperature);
    s.finish();
  }
  {
    detail::Section s(root, "coldstart");
    s.read("paths_per_item", c.coldstart.paths_per_item);
    s.read("temperature", c.coldstart.temperature);
    s.read("hardness_threshold", c.coldstart.hardness_threshold);
    s.read("epochs", c.coldstart.sft_epochs);
    s.read("learning_rate", c.coldstart.sft_learning_rate);
    s.finish();
  }
  {
    detail::Section s(root, "eval");
    s.read("n_samples", c.eval.n_samples);
    s.read("k", c.eval.k_values);
    s.read("temperature", c.eval.temperature);
    s.finish();
  }
  {
    detail::Section s(root, "run");
    s.read("seed", c.run.seed);
    s.read("steps", c.run.steps);
    s.read("out_dir", c.run.out_dir);
    s.read("checkpoint_every", c.run.checkpoint_every);
    s.read("threads", c.run.threads);
    s.read("curate", c.run.curate);
    s.read("cold_start", c.run.cold_start);
    s.finish();
  }
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["env"] = {{"d", c.env.d}, {"Q", c.env.Q}, {"K", c.env.K}, {"prior_strength", c.env.prior_strength},
              {"n_train", c.env.n_train}, {"n_eval_in_prior", c.env.n_eval_in_prior},
              {"n_eval_anti_prior", c.env.n_eval_anti_prior}};
  if (c.env_seed_set) j["env"]["seed"] = c.env.seed;
  j["policy"] = {{"fillers", c.policy.fillers}, {"L", c.policy.L}, {"stop_token", c.policy.stop_token},
                 {"answer_features", c.policy.answer_features}, {"input_gain", c.policy.input_gain},
                 {"init_scale", c.policy.init_scale}, {"init_consistency", c.policy.init_consistency}};
  j["perturb"] = {{"kind", to_string(c.perturb.kind)}, {"diffusion_steps", c.perturb.diffusion_steps},
                  {"schedule_length", c.perturb.schedule_length}, {"beta_start", c.perturb.beta_start},
                  {"beta_end", c.perturb.beta_end}, {"mask_fraction", c.perturb.mask_fraction},
                  {"crop_fraction", c.perturb.crop_fraction}};
  j["reward"] = {{"dar", c.reward.r_dar}, {"cdr", c.reward.r_cdr}, {"pcr", c.reward.r_pcr},
                 {"tau_pcr", c.reward.tau_pcr}};
  j["optim"] = {{"G", c.optim.G}, {"clip_eps", c.optim.clip_eps}, {"kl_beta", c.optim.kl_beta},
                {"entropy_coef", c.optim.entropy_coef}, {"delta", c.optim.delta},
                {"learning_rate", c.optim.learning_rate}, {"batch_size", c.optim.batch_size},
                {"inner_epochs", c.optim.inner_epochs}, {"temperature", c.optim.temperature},
                {"algorithm", to_string(c.optim.algorithm)}};
  j["judge"] = {{"kind", c.judge.kind == JudgeKind::Rule ? "rule" : "remote"}};
  if (c.judge.kind == JudgeKind::Remote) {
    const auto& r = c.judge.remote;
    j["judge"].update({{"url", r.url}, {"path", r.path}, {"model", r.model}, {"token_env", r.token_env},
                       {"attempt_timeout_s", r.attempt_timeout_s}, {"total_timeout_s", r.total_timeout_s},
                       {"attempts", r.attempts}, {"backoff_initial_s", r.backoff_initial_s},
                       {"max_in_flight", r.max_in_flight}});
  }
  j["curation"] = {{"n_samples", c.curation.n_samples}, {"temperature", c.curation.temperature}};
  j["coldstart"] = {{"paths_per_item", c.coldstart.paths_per_item}, {"temperature", c.coldstart.temperature},
                    {"hardness_threshold", c.coldstart.hardness_threshold}, {"epochs", c.coldstart.sft_epochs},
                    {"learning_rate", c.coldstart.sft_learning_rate}};
  j["eval"] = {{"n_samples", c.eval.n_samples}, {"k", c.eval.k_values}, {"temperature", c.eval.temperature}};
  j["run"] = {{"seed", c.run.seed}, {"steps", c.run.steps}, {"out_dir", c.run.out_dir},
              {"checkpoint_every", c.run.checkpoint_every}, {"threads", c.run.threads},
              {"curate", c.run.curate}, {"cold_start", c.run.cold_start}};
  return j;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  const auto j = nlohmann::json::parse(in, nullptr, false, /*ignore_comments=*/true);
  if (j.is_discarded()) throw ConfigError("config file " + path + " is not valid JSON");
  return config_from_json(j);
}

}  // namespace capo
