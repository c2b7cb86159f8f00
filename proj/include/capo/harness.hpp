#pragma once

// Experiment presets (one varied factor across a seed list), summary tables,
// and long-format merging of per-run metrics files.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "capo/config.hpp"
#include "capo/errors.hpp"
#include "capo/trainer.hpp"

namespace capo {

struct PresetLevel {
  std::string label;
  RunConfig config;
};

struct ExperimentPreset {
  std::string name;
  std::string factor;                // e.g. "algorithm"
  std::vector<std::string> factor_keys;  // flattened config paths the factor may touch
  RunConfig base;
  std::vector<PresetLevel> levels;
  std::vector<std::uint64_t> seeds;
};

/// Flattened config paths on which `a` and `b` differ.
inline std::set<std::string> config_diff(const RunConfig& a, const RunConfig& b) {
  const auto fa = config_to_json(a).flatten();
  const auto fb = config_to_json(b).flatten();
  std::set<std::string> out;
  for (auto it = fa.begin(); it != fa.end(); ++it)
    if (!fb.contains(it.key()) || fb.at(it.key()) != it.value()) out.insert(it.key());
  for (auto it = fb.begin(); it != fb.end(); ++it)
    if (!fa.contains(it.key())) out.insert(it.key());
  return out;
}

inline void validate_preset(const ExperimentPreset& p) {
  if (p.levels.empty()) throw ConfigError("preset '" + p.name + "' has no levels");
  if (p.seeds.empty()) throw ConfigError("preset '" + p.name + "' has no seeds");
  std::set<std::string> labels;
  for (const auto& lvl : p.levels) {
    if (!labels.insert(lvl.label).second) throw ConfigError("preset '" + p.name + "' repeats level " + lvl.label);
    lvl.config.validate();
    for (const auto& key : config_diff(p.base, lvl.config)) {
      const bool allowed = std::find(p.factor_keys.begin(), p.factor_keys.end(), key) != p.factor_keys.end();
      if (!allowed)
        throw ConfigError("preset '" + p.name + "' level " + lvl.label + " changes " + key +
                          " outside factor " + p.factor);
    }
  }
}

inline std::vector<std::string> preset_names() {
  return {"capo_vs_grpo", "components", "noise", "diffusion_steps", "reward_ratio", "tau", "paradigm"};
}

/// Builds a named preset around `base`.
inline ExperimentPreset make_preset(const std::string& name, const RunConfig& base,
                                    std::vector<std::uint64_t> seeds) {
  ExperimentPreset p;
  p.name = name;
  p.base = base;
  p.seeds = std::move(seeds);
  auto add = [&](std::string label, auto&& mutate) {
    RunConfig c = base;
    mutate(c);
    p.levels.push_back({std::move(label), std::move(c)});
  };
  auto algo = [&](Algorithm a) { add(to_string(a), [a](RunConfig& c) { c.optim.algorithm = a; }); };

  if (name == "capo_vs_grpo" || name == "components") {
    p.factor = "algorithm";
    p.factor_keys = {"/optim/algorithm"};
    algo(Algorithm::CAPO);
    algo(Algorithm::GRPO_DAR_only);
    if (name == "components") {
      algo(Algorithm::DAR_CDR);
      algo(Algorithm::DAR_PCR);
    }
  } else if (name == "noise") {
    p.factor = "perturbation";
    p.factor_keys = {"/perturb/kind"};
    for (auto k : {PerturbationKind::Diffusion, PerturbationKind::Mask, PerturbationKind::Crop})
      add(to_string(k), [k](RunConfig& c) { c.perturb.kind = k; });
  } else if (name == "diffusion_steps") {
    p.factor = "diffusion_steps";
    p.factor_keys = {"/perturb/diffusion_steps", "/perturb/kind"};
    for (int t : {0, 100, 300})
      add("t" + std::to_string(t), [t](RunConfig& c) {
        c.perturb.kind = PerturbationKind::Diffusion;
        c.perturb.diffusion_steps = t;
      });
  } else if (name == "reward_ratio") {
    p.factor = "reward_ratio";
    p.factor_keys = {"/reward/dar", "/reward/cdr", "/reward/pcr"};
    struct R { const char* label; double dar, cdr, pcr; };
    for (R r : {R{"8:1:1", 0.8, 0.1, 0.1}, R{"2:1:1", 0.5, 0.25, 0.25}, R{"1:1:1", 1.0 / 3, 1.0 / 3, 1.0 / 3}})
      add(r.label, [r](RunConfig& c) {
        c.reward.r_dar = r.dar;
        c.reward.r_cdr = r.cdr;
        c.reward.r_pcr = r.pcr;
      });
  } else if (name == "tau") {
    p.factor = "tau_pcr";
    p.factor_keys = {"/reward/tau_pcr"};
    for (double t : {0.1, 0.3, 0.5}) {
      std::ostringstream label;
      label << "tau" << t;
      add(label.str(), [t](RunConfig& c) { c.reward.tau_pcr = t; });
    }
  } else if (name == "paradigm") {
    p.factor = "cold_start";
    p.factor_keys = {"/run/cold_start"};
    add("zero", [](RunConfig& c) { c.run.cold_start = false; });
    add("cold_start", [](RunConfig& c) { c.run.cold_start = true; });
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  validate_preset(p);
  return p;
}

struct PresetRunRecord {
  std::string level;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::optional<EvalResult> in_prior;
  std::optional<EvalResult> anti_prior;
  double final_reward = 0.0;  // mean critic score over the last step
};

struct SummaryRow {
  std::string level;
  std::size_t n_seeds = 0;
  std::size_t n_completed = 0;
  std::map<std::string, std::pair<double, double>> stats;  // metric -> (mean, std)
};

struct PresetOutcome {
  std::vector<PresetRunRecord> runs;
  std::vector<SummaryRow> summary;
};

/// Mean and sample standard deviation (0 for a single value).
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

inline std::vector<std::string> summary_metrics(const EvalConfig& ecfg) {
  std::vector<std::string> m{"in_prior_accuracy", "anti_prior_accuracy"};
  for (int k : ecfg.k_values) m.push_back("pass@" + std::to_string(k));
  m.push_back("mean_response_length");
  m.push_back("final_reward");
  return m;
}

inline std::map<std::string, double> record_metrics(const PresetRunRecord& r) {
  std::map<std::string, double> m;
  if (r.in_prior) m["in_prior_accuracy"] = r.in_prior->greedy_accuracy;
  if (r.anti_prior) {
    m["anti_prior_accuracy"] = r.anti_prior->greedy_accuracy;
    for (const auto& [k, v] : r.anti_prior->pass_at) m["pass@" + std::to_string(k)] = v;
    m["mean_response_length"] = r.anti_prior->mean_response_length;
  }
  m["final_reward"] = r.final_reward;
  return m;
}

inline void write_summary(const std::string& path, const ExperimentPreset& p, const PresetOutcome& o) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const auto metrics = summary_metrics(p.base.eval);
  out << p.factor << ",n_seeds,n_completed";
  for (const auto& m : metrics) out << ',' << m << "_mean," << m << "_std";
  out << '\n';
  for (const auto& row : o.summary) {
    out << row.level << ',' << row.n_seeds << ',' << row.n_completed;
    for (const auto& m : metrics) {
      auto it = row.stats.find(m);
      if (it == row.stats.end()) out << ",,";
      else out << ',' << format_double(it->second.first) << ',' << format_double(it->second.second);
    }
    out << '\n';
  }
}

inline void write_run_table(const std::string& path, const ExperimentPreset& p, const PresetOutcome& o) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << p.factor << ",seed,status,in_prior_accuracy,anti_prior_accuracy,error\n";
  for (const auto& r : o.runs) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << r.level << ',' << r.seed << ',' << (r.ok ? "ok" : "failed") << ','
        << (r.in_prior ? format_double(r.in_prior->greedy_accuracy) : "") << ','
        << (r.anti_prior ? format_double(r.anti_prior->greedy_accuracy) : "") << ',' << err << '\n';
  }
}

/// Trains every (level, seed) pair into <out_dir>/<level>/seed_<s>/ and
/// writes summary.csv (one row per level) and runs.csv (one row per run).
/// Failed runs are recorded and excluded from the aggregates.
inline PresetOutcome run_preset(const ExperimentPreset& p, const std::string& out_dir, int parallel_runs = 1) {
  validate_preset(p);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

  PresetOutcome o;
  for (const auto& lvl : p.levels)
    for (auto s : p.seeds) o.runs.push_back({lvl.label, s});

  detail::parallel_for(o.runs.size(), parallel_runs, [&](std::size_t i) {
    auto& rec = o.runs[i];
    const auto& lvl = *std::find_if(p.levels.begin(), p.levels.end(),
                                    [&](const PresetLevel& l) { return l.label == rec.level; });
    RunConfig c = lvl.config;
    c.run.seed = rec.seed;
    c.run.out_dir = (fs::path(out_dir) / lvl.label / ("seed_" + std::to_string(rec.seed))).string();
    try {
      auto res = train_loop(c);
      rec.in_prior = res.eval_in_prior;
      rec.anti_prior = res.eval_anti_prior;
      if (!res.stats.empty()) rec.final_reward = res.stats.back().mean_reward;
      rec.ok = true;
    } catch (const std::exception& e) {
      rec.error = e.what();
    }
  });

  const auto metrics = summary_metrics(p.base.eval);
  for (const auto& lvl : p.levels) {
    SummaryRow row;
    row.level = lvl.label;
    row.n_seeds = p.seeds.size();
    std::map<std::string, std::vector<double>> values;
    for (const auto& r : o.runs) {
      if (r.level != lvl.label || !r.ok) continue;
      ++row.n_completed;
      for (const auto& [k, v] : record_metrics(r)) values[k].push_back(v);
    }
    for (const auto& m : metrics)
      if (!values[m].empty()) row.stats[m] = mean_std(values[m]);
    o.summary.push_back(std::move(row));
  }
  write_summary((fs::path(out_dir) / "summary.csv").string(), p, o);
  write_run_table((fs::path(out_dir) / "runs.csv").string(), p, o);
  return o;
}

// ---------------------------------------------------------------- report

/// Columns merged into the long-format table; each becomes one series.
inline const std::vector<std::string>& report_series() {
  static const std::vector<std::string> s{"mean_reward", "mean_response_length", "kl",
                                          "mean_dar",    "mean_cdr",             "mean_pcr"};
  return s;
}

struct LongRow {
  std::string run;
  std::uint64_t step = 0;
  std::string series;
  std::string value;  // copied verbatim from the metrics file
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Merges metrics files (run name, path) into rows sorted by (run, step),
/// series in report_series() order within a step.
inline std::vector<LongRow> merge_metrics(const std::vector<std::pair<std::string, std::string>>& runs) {
  std::vector<LongRow> rows;
  for (const auto& [run, path] : runs) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open metrics file " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError("metrics file " + path + " is empty");
    const auto header = split_csv_line(line);
    auto col = [&](const std::string& name) -> std::size_t {
      auto it = std::find(header.begin(), header.end(), name);
      if (it == header.end()) throw IoError("metrics file " + path + " is missing column '" + name + "'");
      return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t step_col = col("step");
    std::vector<std::size_t> cols;
    for (const auto& s : report_series()) cols.push_back(col(s));
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto cells = split_csv_line(line);
      if (cells.size() != header.size())
        throw IoError("metrics file " + path + " line " + std::to_string(line_no) + " has " +
                      std::to_string(cells.size()) + " fields, expected " + std::to_string(header.size()));
      std::uint64_t step = 0;
      try {
        step = std::stoull(cells[step_col]);
      } catch (const std::exception&) {
        throw IoError("metrics file " + path + " line " + std::to_string(line_no) + ": bad value in column 'step'");
      }
      for (std::size_t s = 0; s < cols.size(); ++s) rows.push_back({run, step, report_series()[s], cells[cols[s]]});
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const LongRow& a, const LongRow& b) {
    return a.run != b.run ? a.run < b.run : a.step < b.step;
  });
  return rows;
}

inline void report(const std::vector<std::pair<std::string, std::string>>& runs, const std::string& out_path) {
  const auto rows = merge_metrics(runs);
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + out_path + " for writing");
  out << "run,step,series,value\n";
  for (const auto& r : rows) out << r.run << ',' << r.step << ',' << r.series << ',' << r.value << '\n';
}

}  // namespace capo
