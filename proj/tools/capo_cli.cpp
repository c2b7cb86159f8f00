#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "capo/capo.hpp"

namespace fs = std::filesystem;
using namespace capo;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON run config");
  app->add_option("--seed", c.seed, "overrides run.seed");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  if (c.seed) cfg.run.seed = *c.seed;
  cfg.validate();
  return cfg;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
}

// Base policy for commands that accept an optional checkpoint.
PolicyParams policy_or_init(const RunConfig& cfg, const std::string& checkpoint) {
  if (!checkpoint.empty()) {
    PolicyParams p = load_policy(checkpoint);
    if (!(p.shape() == cfg.policy_shape())) throw ConfigError("checkpoint shape does not match the config");
    return p;
  }
  return make_policy(cfg.policy_shape(), cfg.policy.init_scale, cfg.policy.init_consistency,
                     RunSeeds(cfg.run.seed).init);
}

std::vector<TaskItem> items_or_train(const RunConfig& cfg, const std::string& input) {
  if (!input.empty()) return read_items(input);
  return generate_dataset(cfg.effective_env()).train;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capo: consistency-aware policy optimization on a synthetic perception task"};
  app.require_subcommand(1);

  // generate
  Common gen_c;
  std::string gen_out = "data";
  auto* gen = app.add_subcommand("generate", "write train / eval splits as JSONL");
  add_common(gen, gen_c);
  gen->add_option("--out", gen_out, "output directory");

  // curate
  Common cur_c;
  std::string cur_in, cur_ckpt, cur_out = "kept.jsonl", cur_report = "curation.json";
  auto* cur = app.add_subcommand("curate", "mixed-difficulty filter over a dataset");
  add_common(cur, cur_c);
  cur->add_option("--input", cur_in, "items JSONL (default: generated training split)");
  cur->add_option("--checkpoint", cur_ckpt, "policy used for sampling (default: base policy)");
  cur->add_option("--out", cur_out, "kept items JSONL");
  cur->add_option("--report", cur_report, "report JSON");

  // train
  Common tr_c;
  std::string tr_out, tr_resume;
  std::optional<int> tr_steps;
  auto* tr = app.add_subcommand("train", "run policy optimization");
  add_common(tr, tr_c);
  tr->add_option("--out-dir", tr_out, "overrides run.out_dir");
  tr->add_option("--steps", tr_steps, "overrides run.steps");
  tr->add_option("--resume", tr_resume, "trainer checkpoint to resume from");

  // sft
  Common sft_c;
  std::string sft_in, sft_ckpt, sft_out = "sft.ckpt", sft_corpus;
  auto* sft = app.add_subcommand("sft", "cold start: collect correct reasoning paths and fit them");
  add_common(sft, sft_c);
  sft->add_option("--input", sft_in, "items JSONL (default: generated training split)");
  sft->add_option("--checkpoint", sft_ckpt, "sampling policy (default: base policy)");
  sft->add_option("--out", sft_out, "output policy checkpoint");
  sft->add_option("--corpus", sft_corpus, "also write the SFT corpus as JSONL");

  // eval
  Common ev_c;
  std::string ev_ckpt, ev_in, ev_split = "anti_prior", ev_out;
  auto* ev = app.add_subcommand("eval", "greedy accuracy, pass@k and response length");
  add_common(ev, ev_c);
  ev->add_option("--checkpoint", ev_ckpt, "policy or trainer checkpoint (default: base policy)");
  ev->add_option("--input", ev_in, "items JSONL (default: a generated eval split)");
  ev->add_option("--split", ev_split, "generated split when no input is given")
      ->check(CLI::IsMember({"in_prior", "anti_prior", "train"}));
  ev->add_option("--out", ev_out, "output JSON (default: stdout)");

  // preset
  Common pr_c;
  std::string pr_name, pr_out = "runs/preset";
  std::vector<std::uint64_t> pr_seeds;
  int pr_parallel = 1;
  auto* pr = app.add_subcommand("preset", "run an experiment preset across seeds");
  add_common(pr, pr_c);
  pr->add_option("--name", pr_name, "preset name")->required()->check(CLI::IsMember(preset_names()));
  pr->add_option("--seeds", pr_seeds, "seed list (default: --seed or run.seed)")->delimiter(',');
  pr->add_option("--out-dir", pr_out, "output directory");
  pr->add_option("--parallel", pr_parallel, "concurrent runs")->check(CLI::PositiveNumber);

  // report
  Common rep_c;
  std::vector<std::string> rep_runs;
  std::string rep_out = "curves.csv";
  auto* rep = app.add_subcommand("report", "merge metrics files into one long-format table");
  add_common(rep, rep_c);
  rep->add_option("--run", rep_runs, "NAME=PATH of a metrics.csv (repeatable)")->required();
  rep->add_option("--out", rep_out, "output CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      const RunConfig cfg = resolve(gen_c);
      const Dataset ds = generate_dataset(cfg.effective_env());
      ensure_dir(gen_out);
      write_items((fs::path(gen_out) / "train.jsonl").string(), ds.train);
      write_items((fs::path(gen_out) / "eval_in_prior.jsonl").string(), ds.eval_in_prior);
      write_items((fs::path(gen_out) / "eval_anti_prior.jsonl").string(), ds.eval_anti_prior);
      std::cout << "wrote " << ds.train.size() << " train, " << ds.eval_in_prior.size() << " in-prior, "
                << ds.eval_anti_prior.size() << " anti-prior items to " << gen_out << '\n';
    } else if (cur->parsed()) {
      const RunConfig cfg = resolve(cur_c);
      const auto items = items_or_train(cfg, cur_in);
      CurationConfig cc = cfg.curation;
      cc.seed = RunSeeds(cfg.run.seed).curation;
      auto [kept, report] = mixed_difficulty_filter(policy_or_init(cfg, cur_ckpt), items, cc);
      write_items(cur_out, kept);
      write_json(cur_report, report_to_json(report));
      std::cout << "kept " << report.kept << " of " << report.input << " items\n";
    } else if (tr->parsed()) {
      RunConfig cfg = resolve(tr_c);
      if (!tr_out.empty()) cfg.run.out_dir = tr_out;
      if (tr_steps) cfg.run.steps = *tr_steps;
      cfg.validate();
      const auto res = train_loop(cfg, tr_resume.empty() ? std::nullopt : std::optional(tr_resume));
      std::cout << "trained to step " << res.state.step << "; outputs in " << cfg.run.out_dir << '\n';
      if (res.eval_anti_prior)
        std::cout << "anti-prior accuracy " << res.eval_anti_prior->greedy_accuracy << '\n';
    } else if (sft->parsed()) {
      const RunConfig cfg = resolve(sft_c);
      const auto items = items_or_train(cfg, sft_in);
      ColdStartConfig cs = cfg.coldstart;
      cs.seed = RunSeeds(cfg.run.seed).coldstart;
      const PolicyParams base = policy_or_init(cfg, sft_ckpt);
      const auto corpus = cold_start_collect(base, items, cs);
      if (!sft_corpus.empty()) write_corpus(sft_corpus, corpus);
      if (corpus.empty()) throw UsageError("cold start collected no reasoning paths");
      const PolicyParams tuned = sft_update(base, corpus, cs.sft_epochs, cs.sft_learning_rate);
      save_policy(sft_out, tuned);
      std::cout << "corpus " << corpus.size() << " paths; mean log-likelihood " << mean_log_likelihood(base, corpus)
                << " -> " << mean_log_likelihood(tuned, corpus) << '\n';
    } else if (ev->parsed()) {
      const RunConfig cfg = resolve(ev_c);
      std::vector<TaskItem> items;
      std::string split = ev_split;
      if (!ev_in.empty()) {
        items = read_items(ev_in);
        split = fs::path(ev_in).stem().string();
      } else {
        Dataset ds = generate_dataset(cfg.effective_env());
        items = ev_split == "in_prior" ? ds.eval_in_prior : ev_split == "train" ? ds.train : ds.eval_anti_prior;
      }
      EvalConfig ec = cfg.eval;
      ec.seed = RunSeeds(cfg.run.seed).eval;
      write_json(ev_out, to_json(evaluate(policy_or_init(cfg, ev_ckpt), items, ec, split)));
    } else if (pr->parsed()) {
      const RunConfig cfg = resolve(pr_c);
      if (pr_seeds.empty()) pr_seeds.push_back(cfg.run.seed);
      const auto preset = make_preset(pr_name, cfg, pr_seeds);
      const auto outcome = run_preset(preset, pr_out, pr_parallel);
      std::size_t failed = 0;
      for (const auto& r : outcome.runs) failed += !r.ok;
      std::cout << "preset " << pr_name << ": " << outcome.runs.size() - failed << " of " << outcome.runs.size()
                << " runs completed; summary in " << (fs::path(pr_out) / "summary.csv").string() << '\n';
      for (const auto& r : outcome.runs)
        if (!r.ok) std::cerr << "run " << r.level << " seed " << r.seed << " failed: " << r.error << '\n';
      if (failed == outcome.runs.size()) return 1;
    } else if (rep->parsed()) {
      std::vector<std::pair<std::string, std::string>> runs;
      for (const auto& run_arg : rep_runs) {
        const auto eq = run_arg.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == run_arg.size())
          throw UsageError("--run expects NAME=PATH, got '" + run_arg + "'");
        runs.emplace_back(run_arg.substr(0, eq), run_arg.substr(eq + 1));
      }
      report(runs, rep_out);
      std::cout << "wrote " << rep_out << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "capo: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
