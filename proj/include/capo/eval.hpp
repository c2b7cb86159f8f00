#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/policy.hpp"
#include "capo/random.hpp"

namespace capo {

struct Rational {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Rational& a, const Rational& b) {
    return static_cast<unsigned __int128>(a.num) * b.den == static_cast<unsigned __int128>(b.num) * a.den;
  }
};

/// Binomial coefficient; exact for n <= 62.
inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i)  // exact at every step
    r = static_cast<std::uint64_t>(static_cast<unsigned __int128>(r) * (n - k + i) / i);
  return r;
}

inline void check_pass_args(int n, int c, int k) {
  if (n < 1 || c < 0 || c > n || k < 1 || k > n)
    throw UsageError("pass_at_k requires 0 <= c <= n and 1 <= k <= n (got n=" + std::to_string(n) +
                     ", c=" + std::to_string(c) + ", k=" + std::to_string(k) + ")");
}

/// 1 - C(n - c, k) / C(n, k) as a reduced fraction (n <= 62).
inline Rational pass_at_k_exact(int n, int c, int k) {
  check_pass_args(n, c, k);
  if (n > 62) throw UsageError("pass_at_k_exact supports n <= 62");
  const std::uint64_t total = binomial(n, k);
  const std::uint64_t miss = binomial(n - c, k);
  Rational r{total - miss, total};
  const std::uint64_t g = std::gcd(r.num, r.den);
  if (g > 1) r = {r.num / g, r.den / g};
  return r;
}

/// Unbiased pass@k estimator. Exact rational arithmetic for n <= 62, a
/// log-space product beyond that.
inline double pass_at_k(int n, int c, int k) {
  check_pass_args(n, c, k);
  if (n <= 62) return pass_at_k_exact(n, c, k).value();
  if (n - c < k) return 1.0;
  // C(n-c, k) / C(n, k) = prod_{i=0}^{k-1} (n - c - i) / (n - i)
  long double log_ratio = 0.0L;
  for (int i = 0; i < k; ++i) log_ratio += std::log(static_cast<long double>(n - c - i) / (n - i));
  return static_cast<double>(1.0L - std::exp(log_ratio));
}

struct EvalConfig {
  int n_samples = 10;
  std::vector<int> k_values{1, 5, 10};
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_samples < 1) throw ConfigError("eval.n_samples must be >= 1");
    for (int k : k_values)
      if (k < 1 || k > n_samples) throw ConfigError("eval.k values must lie in [1, n_samples]");
    if (!(temperature > 0.0)) throw ConfigError("eval.temperature must be > 0");
  }
};

struct EvalResult {
  std::string split;
  double greedy_accuracy = 0.0;
  std::map<int, double> pass_at;          // k -> mean pass@k
  std::optional<double> anti_prior_accuracy;  // greedy accuracy on items with gold != prior
  double mean_response_length = 0.0;      // over sampled rollouts
  std::size_t n_items = 0;
  std::size_t n_anti_prior = 0;
};

inline nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json j{{"split", r.split},
                   {"greedy_accuracy", r.greedy_accuracy},
                   {"mean_response_length", r.mean_response_length},
                   {"n_items", r.n_items},
                   {"n_anti_prior", r.n_anti_prior}};
  j["anti_prior_accuracy"] = r.anti_prior_accuracy ? nlohmann::json(*r.anti_prior_accuracy) : nlohmann::json();
  for (const auto& [k, v] : r.pass_at) j["pass_at_k"][std::to_string(k)] = v;
  return j;
}

/// Greedy accuracy uses temperature-0 decoding and is seed independent;
/// pass@k draws n samples per item from a stream keyed by item id.
inline EvalResult evaluate(const PolicyParams& params, const std::vector<TaskItem>& items,
                           const EvalConfig& ecfg, std::string split = "eval") {
  if (items.empty()) throw UsageError("evaluate: empty item list");
  ecfg.validate();
  EvalResult res;
  res.split = std::move(split);
  res.n_items = items.size();
  std::size_t greedy_correct = 0, anti_correct = 0, sampled = 0;
  double length_sum = 0.0;
  std::map<int, double> pass_sum;
  SamplingConfig scfg;
  scfg.temperature = ecfg.temperature;

  for (const auto& item : items) {
    const bool correct = greedy_rollout(params, item.observation).answer == item.gold_answer;
    greedy_correct += correct;
    if (item.gold_answer != item.prior_answer) {
      ++res.n_anti_prior;
      anti_correct += correct;
    }
    Rng rng(derive_seed(ecfg.seed, {0xe7a1, item.item_id}));
    int c = 0;
    for (int j = 0; j < ecfg.n_samples; ++j) {
      const Rollout r = sample_rollout(params, item.observation, scfg, rng);
      c += r.answer == item.gold_answer;
      length_sum += static_cast<double>(r.response_length(params.shape()));
      ++sampled;
    }
    for (int k : ecfg.k_values) pass_sum[k] += pass_at_k(ecfg.n_samples, c, k);
  }
  const double n = static_cast<double>(items.size());
  res.greedy_accuracy = static_cast<double>(greedy_correct) / n;
  if (res.n_anti_prior > 0) res.anti_prior_accuracy = static_cast<double>(anti_correct) / static_cast<double>(res.n_anti_prior);
  for (const auto& [k, s] : pass_sum) res.pass_at[k] = s / n;
  res.mean_response_length = length_sum / static_cast<double>(sampled);
  return res;
}

}  // namespace capo
