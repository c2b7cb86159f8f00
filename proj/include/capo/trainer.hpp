#pragma once

// Training step and loop. Randomness is keyed by (run seed, step, batch
// slot, rollout index), so a run resumed from a checkpoint at step k follows
// the uninterrupted trajectory, and threaded group building does not change
// results.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "capo/checkpoint.hpp"
#include "capo/config.hpp"
#include "capo/curation.hpp"
#include "capo/dataset_io.hpp"
#include "capo/env.hpp"
#include "capo/eval.hpp"
#include "capo/judge.hpp"
#include "capo/optimizer.hpp"
#include "capo/policy.hpp"
#include "capo/remote_judge.hpp"

namespace capo {

struct TrainStats {
  std::uint64_t step = 0;
  double mean_reward = 0.0;  // critic score
  double mean_dar = 0.0;
  double mean_cdr = 0.0;
  double mean_pcr = 0.0;
  double mean_response_length = 0.0;
  double loss = 0.0;
  double kl = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  std::size_t judge_fallbacks = 0;
  std::size_t rollouts_in_gradient = 0;
  std::size_t corrupted_in_gradient = 0;
  bool aborted = false;
  double wall_time_s = 0.0;  // not written to the metrics file
};

/// Fixed metrics-file columns, in order.
inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols{
      "step", "mean_reward", "mean_dar", "mean_cdr", "mean_pcr", "mean_response_length",
      "loss", "kl", "entropy", "clip_fraction", "judge_fallbacks", "aborted"};
  return cols;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_header() {
  std::string s;
  for (const auto& c : metrics_columns()) s += (s.empty() ? "" : ",") + c;
  return s;
}

inline std::string metrics_row(const TrainStats& st) {
  std::string s = std::to_string(st.step);
  for (double v : {st.mean_reward, st.mean_dar, st.mean_cdr, st.mean_pcr, st.mean_response_length,
                   st.loss, st.kl, st.entropy, st.clip_fraction})
    s += "," + format_double(v);
  s += "," + std::to_string(st.judge_fallbacks) + "," + (st.aborted ? "1" : "0");
  return s;
}

struct TrainContext {
  PerturbationConfig perturb;
  OptimConfig optim;
  RewardConfig reward;
  Judge* judge = nullptr;
  std::uint64_t seed = 0;
  int threads = 1;
};

/// Batch for `step`: batch_size distinct items when possible, drawn from a
/// stream keyed by (seed, step).
inline std::vector<TaskItem> select_batch(const std::vector<TaskItem>& items, int batch_size,
                                          std::uint64_t seed, std::uint64_t step) {
  if (items.empty()) throw UsageError("select_batch: no training items");
  Rng rng(derive_seed(seed, {0xba7c, step}));
  std::vector<std::size_t> idx(items.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::vector<TaskItem> batch;
  for (int b = 0; b < batch_size; ++b) {
    const std::size_t pos = static_cast<std::size_t>(b) % idx.size();
    if (pos == 0 && b > 0) continue;  // wrapped: fall back to with-replacement draws below
    std::swap(idx[pos], idx[pos + rng.index(idx.size() - pos)]);
    batch.push_back(items[idx[pos]]);
  }
  while (batch.size() < static_cast<std::size_t>(batch_size)) batch.push_back(items[rng.index(items.size())]);
  return batch;
}

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::jthread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  pool.clear();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

/// One policy-optimization step on `batch`. On a non-finite loss or gradient
/// the parameters are left untouched and the stats are flagged.
inline TrainStats train_step(TrainerState& state, const std::vector<TaskItem>& batch, const TrainContext& ctx) {
  if (!ctx.judge) throw UsageError("train_step: no judge");
  if (batch.empty()) throw UsageError("train_step: empty batch");
  ctx.optim.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t behavior_version = state.params.version();

  std::vector<GroupBatch> groups(batch.size());
  detail::parallel_for(batch.size(), ctx.threads, [&](std::size_t b) {
    groups[b] = build_group(state.params, batch[b], ctx.perturb, ctx.optim, ctx.reward, *ctx.judge,
                            derive_seed(ctx.seed, {state.step, b}));
    assign_advantages(groups[b], ctx.optim.delta);
  });

  TrainStats st;
  st.step = state.step + 1;
  double n_rollouts = 0.0;
  for (const auto& g : groups)
    for (std::size_t i = 0; i < g.originals.size(); ++i) {
      const auto& r = g.rewards[i];
      st.mean_reward += r.total;
      st.mean_dar += r.dar;
      st.mean_cdr += r.cdr;
      st.mean_pcr += r.pcr;
      st.mean_response_length += static_cast<double>(g.originals[i].response_length(state.params.shape()));
      st.judge_fallbacks += r.judge_source == JudgeSource::Fallback;
      n_rollouts += 1.0;
    }
  for (double* v : {&st.mean_reward, &st.mean_dar, &st.mean_cdr, &st.mean_pcr, &st.mean_response_length})
    *v /= n_rollouts;

  PolicyParams theta = state.params;
  const double inv_b = 1.0 / static_cast<double>(groups.size());
  for (int epoch = 0; epoch < ctx.optim.inner_epochs; ++epoch) {
    std::vector<SurrogateResult> results(groups.size());
    detail::parallel_for(groups.size(), ctx.threads, [&](std::size_t b) {
      results[b] = surrogate_loss(theta, state.reference, groups[b], ctx.optim, behavior_version);
    });
    Gradient grad(theta.shape().size());
    double loss = 0.0, kl = 0.0, ent = 0.0, clip = 0.0;
    for (auto& r : results) {  // ordered reduction
      grad += r.grad;
      loss += r.loss;
      kl += r.kl;
      ent += r.entropy;
      clip += r.clip_fraction;
      if (epoch == 0) {
        st.rollouts_in_gradient += r.rollouts_in_gradient;
        st.corrupted_in_gradient += r.corrupted_in_gradient;
      }
    }
    grad *= inv_b;
    if (epoch == 0) {
      st.loss = loss * inv_b;
      st.kl = kl * inv_b;
      st.entropy = ent * inv_b;
      st.clip_fraction = clip * inv_b;
    }
    if (!std::isfinite(loss) || !grad.all_finite()) {
      std::cerr << "train_step " << st.step << ": non-finite loss or gradient (loss=" << loss
                << "); keeping previous parameters\n";
      st.aborted = true;
      break;
    }
    theta.apply(grad, -ctx.optim.learning_rate);
  }
  if (!st.aborted) {
    theta.set_version(behavior_version + 1);
    state.params = std::move(theta);
  }
  ++state.step;
  st.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return st;
}

inline std::unique_ptr<Judge> make_judge(const JudgeConfig& cfg) {
  if (cfg.kind == JudgeKind::Remote) return std::make_unique<RemoteJudge>(cfg.remote);
  return std::make_unique<RuleJudge>();
}

/// Seeds of the run's sub-streams, all derived from run.seed.
struct RunSeeds {
  std::uint64_t init, train, curation, coldstart, eval;
  explicit RunSeeds(std::uint64_t s)
      : init(derive_seed(s, {1})),
        train(derive_seed(s, {2})),
        curation(derive_seed(s, {3})),
        coldstart(derive_seed(s, {4})),
        eval(derive_seed(s, {5})) {}
};

/// Untrained policy of a run: random init, optionally followed by the
/// cold-start SFT warm start on the (curated) training items.
inline PolicyParams initial_policy(const RunConfig& cfg, const std::vector<TaskItem>& train_items) {
  const RunSeeds seeds(cfg.run.seed);
  PolicyParams p = make_policy(cfg.policy_shape(), cfg.policy.init_scale, cfg.policy.init_consistency, seeds.init);
  if (cfg.run.cold_start) {
    ColdStartConfig cs = cfg.coldstart;
    cs.seed = seeds.coldstart;
    const auto corpus = cold_start_collect(p, train_items, cs);
    if (!corpus.empty()) {
      p = sft_update(p, corpus, cs.sft_epochs, cs.sft_learning_rate);
      p.set_version(0);
    }
  }
  return p;
}

struct PreparedRun {
  Dataset dataset;
  std::vector<TaskItem> train_items;  // after optional curation
  std::optional<CurationReport> curation;
};

inline PreparedRun prepare_run(const RunConfig& cfg) {
  PreparedRun pr;
  pr.dataset = generate_dataset(cfg.effective_env());
  pr.train_items = pr.dataset.train;
  if (cfg.run.curate) {
    const RunSeeds seeds(cfg.run.seed);
    const PolicyParams base =
        make_policy(cfg.policy_shape(), cfg.policy.init_scale, cfg.policy.init_consistency, seeds.init);
    CurationConfig cc = cfg.curation;
    cc.seed = seeds.curation;
    auto [kept, report] = mixed_difficulty_filter(base, pr.train_items, cc);
    pr.train_items = std::move(kept);
    pr.curation = std::move(report);
    if (pr.train_items.empty()) throw ConfigError("curation removed every training item");
  }
  return pr;
}

struct TrainOutcome {
  TrainerState state;
  std::vector<TrainStats> stats;
  std::optional<EvalResult> eval_in_prior;
  std::optional<EvalResult> eval_anti_prior;
};

inline std::string checkpoint_name(std::uint64_t step) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "checkpoint_%06llu.ckpt", static_cast<unsigned long long>(step));
  return buf;
}

/// Runs cfg.run.steps optimization steps (counted from the resume point when
/// resuming) and writes into cfg.run.out_dir:
///   config.json, metrics.csv (header + one row per step), timing.csv,
///   checkpoint_<step>.ckpt (start, every checkpoint_every steps),
///   final.ckpt, eval.json.
inline TrainOutcome train_loop(const RunConfig& cfg, const std::optional<std::string>& resume_from = std::nullopt,
                               Judge* judge_override = nullptr) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path out(cfg.run.out_dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

  const RunSeeds seeds(cfg.run.seed);
  PreparedRun pr = prepare_run(cfg);

  TrainOutcome res;
  if (resume_from) {
    res.state = load_trainer(*resume_from);
    if (!(res.state.params.shape() == cfg.policy_shape()))
      throw ConfigError("checkpoint shape does not match the run config");
  } else {
    res.state.params = initial_policy(cfg, pr.train_items);
    res.state.reference = res.state.params;
    res.state.step = 0;
  }

  {
    std::ofstream cj(out / "config.json");
    cj << config_to_json(cfg).dump(2) << '\n';
  }
  std::ofstream metrics(out / "metrics.csv", std::ios::binary | std::ios::trunc);
  std::ofstream timing(out / "timing.csv", std::ios::binary | std::ios::trunc);
  if (!metrics || !timing) throw IoError("cannot open metrics files in " + out.string());
  metrics << metrics_header() << '\n';
  timing << "step,wall_time_s\n";

  std::unique_ptr<Judge> owned_judge;
  Judge* judge = judge_override;
  if (!judge) {
    owned_judge = make_judge(cfg.judge);
    judge = owned_judge.get();
  }
  TrainContext ctx{cfg.perturb, cfg.optim, cfg.reward, judge, seeds.train, cfg.run.threads};

  if (!resume_from) save_trainer((out / checkpoint_name(0)).string(), res.state);
  const std::uint64_t end_step = res.state.step + static_cast<std::uint64_t>(cfg.run.steps);
  try {
    while (res.state.step < end_step) {
      const auto batch = select_batch(pr.train_items, cfg.optim.batch_size, seeds.train, res.state.step);
      TrainStats st = train_step(res.state, batch, ctx);
      metrics << metrics_row(st) << '\n';
      timing << st.step << ',' << format_double(st.wall_time_s) << '\n';
      if (!metrics) throw IoError("failed writing metrics.csv");
      res.stats.push_back(st);
      if (cfg.run.checkpoint_every > 0 && res.state.step % static_cast<std::uint64_t>(cfg.run.checkpoint_every) == 0)
        save_trainer((out / checkpoint_name(res.state.step)).string(), res.state);
    }
  } catch (...) {
    try {
      save_trainer((out / "abort.ckpt").string(), res.state);
      std::cerr << "training aborted at step " << res.state.step << "; state saved to "
                << (out / "abort.ckpt").string() << '\n';
    } catch (...) {
    }
    throw;
  }
  metrics.flush();
  save_trainer((out / "final.ckpt").string(), res.state);

  EvalConfig ec2 = cfg.eval;
  ec2.seed = seeds.eval;
  nlohmann::json ej = nlohmann::json::object();
  if (!pr.dataset.eval_in_prior.empty()) {
    res.eval_in_prior = evaluate(res.state.params, pr.dataset.eval_in_prior, ec2, "in_prior");
    ej["in_prior"] = to_json(*res.eval_in_prior);
  }
  if (!pr.dataset.eval_anti_prior.empty()) {
    res.eval_anti_prior = evaluate(res.state.params, pr.dataset.eval_anti_prior, ec2, "anti_prior");
    ej["anti_prior"] = to_json(*res.eval_anti_prior);
  }
  if (pr.curation) ej["curation"] = report_to_json(*pr.curation);
  std::ofstream(out / "eval.json") << ej.dump(2) << '\n';
  return res;
}

}  // namespace capo
