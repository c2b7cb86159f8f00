#pragma once

// HTTP client for an external LLM judge speaking a chat-completion protocol.
//
// Request:  POST <url><path>
//           {"model": <model>, "temperature": 0,
//            "messages": [{"role": "user", "content": <rendered prompt>}]}
// Response: text of the first message, read from choices[0].message.content
//           (message.content and content are accepted as well).
//
// Anything other than yes/no falls back to the rule judge; so do transport
// failures once the retry budget is spent. Fallbacks are counted for audit.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <mutex>
#include <semaphore>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>

#include <httplib.h>
#include <json.hpp>

#include "capo/errors.hpp"
#include "capo/judge.hpp"

namespace capo {

struct RemoteJudgeConfig {
  std::string url;                        // http://host:port
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4o";
  std::string token_env = "CAPO_JUDGE_TOKEN";
  double attempt_timeout_s = 5.0;
  double total_timeout_s = 10.0;          // wall-time bound per request, retries included
  int attempts = 3;
  double backoff_initial_s = 0.1;         // doubled after each failed attempt
  int max_in_flight = 4;

  void validate() const {
    if (url.rfind("http://", 0) != 0)
      throw ConfigError("judge.url must start with http:// (got '" + url + "')");
    if (url.size() <= 7) throw ConfigError("judge.url has no host");
    if (path.empty() || path[0] != '/') throw ConfigError("judge.path must start with '/'");
    if (!(attempt_timeout_s > 0.0) || !(total_timeout_s > 0.0))
      throw ConfigError("judge timeouts must be positive");
    if (attempts < 1) throw ConfigError("judge.attempts must be >= 1");
    if (backoff_initial_s < 0.0) throw ConfigError("judge.backoff_initial_s must be >= 0");
    if (max_in_flight < 1 || max_in_flight > 64) throw ConfigError("judge.max_in_flight must lie in [1, 64]");
  }
};

class RemoteJudge final : public Judge {
 public:
  explicit RemoteJudge(RemoteJudgeConfig cfg)
      : cfg_(checked(std::move(cfg))), slots_(cfg_.max_in_flight) {
    if (const char* tok = std::getenv(cfg_.token_env.c_str())) token_ = tok;
  }

  RemoteJudge(const RemoteJudge&) = delete;
  RemoteJudge& operator=(const RemoteJudge&) = delete;

  JudgeVerdict judge(const PolicyShape& shape, const Observation& obs, const Rollout& r) override {
    return judge_request(make_request(shape, obs, r), [&] { return rule_judge(shape, r); });
  }

  /// Judges an already-rendered request; `fallback` supplies the rule verdict.
  template <class Fallback>
  JudgeVerdict judge_request(const JudgeRequest& req, Fallback&& fallback) {
    const std::string prompt = render_prompt(req);
    const std::string key = req.question + '\x1f' + req.think + '\x1f' + req.answer;
    {
      std::shared_lock lock(cache_mutex_);
      if (auto it = cache_.find(key); it != cache_.end()) {
        cache_hits_.fetch_add(1);
        return it->second;
      }
    }

    std::optional<std::string> text;
    {
      slots_.acquire();
      struct Release {
        std::counting_semaphore<64>& s;
        ~Release() { s.release(); }
      } release{slots_};
      requests_.fetch_add(1);
      text = post_with_retries(prompt);
    }

    if (text) {
      if (auto norm = normalize_verdict(*text)) {
        JudgeVerdict v{*norm == "yes", JudgeSource::Remote, *norm};
        std::unique_lock lock(cache_mutex_);
        cache_.emplace(key, v);
        return v;
      }
    }
    fallbacks_.fetch_add(1);
    JudgeVerdict v = fallback();
    v.source = JudgeSource::Fallback;
    v.raw_response = text;
    return v;
  }

  std::size_t requests() const { return requests_.load(); }
  std::size_t cache_hits() const { return cache_hits_.load(); }
  std::size_t fallbacks() const { return fallbacks_.load(); }

 private:
  using Clock = std::chrono::steady_clock;

  static RemoteJudgeConfig checked(RemoteJudgeConfig c) {
    c.validate();
    return c;
  }

  static std::optional<std::string> first_message_text(const std::string& body) {
    const auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) return std::nullopt;
    try {
      if (j.contains("choices") && j["choices"].is_array() && !j["choices"].empty())
        return j["choices"][0].at("message").at("content").get<std::string>();
      if (j.contains("message")) return j["message"].at("content").get<std::string>();
      if (j.contains("content")) return j["content"].get<std::string>();
    } catch (const nlohmann::json::exception&) {
    }
    return std::nullopt;
  }

  // Returns the response text, or nullopt when every attempt failed at the
  // transport/protocol level.
  std::optional<std::string> post_with_retries(const std::string& prompt) {
    const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                             std::chrono::duration<double>(cfg_.total_timeout_s));
    const nlohmann::json body{{"model", cfg_.model},
                              {"temperature", 0},
                              {"messages", {{{"role", "user"}, {"content", prompt}}}}};
    const std::string payload = body.dump();
    double backoff = cfg_.backoff_initial_s;

    for (int attempt = 0; attempt < cfg_.attempts; ++attempt) {
      const double remaining = std::chrono::duration<double>(deadline - Clock::now()).count();
      if (remaining <= 0.0) break;
      const double budget = std::min(cfg_.attempt_timeout_s, remaining);
      const auto usec = std::chrono::microseconds(static_cast<std::int64_t>(budget * 1e6));

      httplib::Client cli(cfg_.url);
      cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(usec).count(),
                                 static_cast<time_t>(usec.count() % 1000000));
      cli.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(usec).count(),
                           static_cast<time_t>(usec.count() % 1000000));
      cli.set_write_timeout(std::chrono::duration_cast<std::chrono::seconds>(usec).count(),
                            static_cast<time_t>(usec.count() % 1000000));
      httplib::Headers headers;
      if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);

      if (auto res = cli.Post(cfg_.path, headers, payload, "application/json"); res && res->status == 200) {
        if (auto text = first_message_text(res->body)) return text;
      }

      const double left = std::chrono::duration<double>(deadline - Clock::now()).count();
      if (attempt + 1 < cfg_.attempts && left > 0.0) {
        std::this_thread::sleep_for(std::chrono::duration<double>(std::min(backoff, left)));
        backoff *= 2.0;
      }
    }
    return std::nullopt;
  }

  RemoteJudgeConfig cfg_;
  std::string token_;
  std::counting_semaphore<64> slots_;
  std::shared_mutex cache_mutex_;
  std::unordered_map<std::string, JudgeVerdict> cache_;
  std::atomic<std::size_t> requests_{0}, cache_hits_{0}, fallbacks_{0};
};

}  // namespace capo
