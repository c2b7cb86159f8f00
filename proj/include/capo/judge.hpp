#pragma once

// Reasoning-to-answer consistency judgment: a deterministic rule judge and
// the yes/no consistency-review prompt used by the remote judge client.

#include <algorithm>
#include <cctype>
#include <optional>
#include <string>
#include <string_view>

#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/policy.hpp"

namespace capo {

enum class JudgeSource { None, Rule, Remote, Fallback };

inline std::string to_string(JudgeSource s) {
  switch (s) {
    case JudgeSource::None: return "none";
    case JudgeSource::Rule: return "rule";
    case JudgeSource::Remote: return "remote";
    case JudgeSource::Fallback: return "fallback";
  }
  return "unknown";
}

struct JudgeVerdict {
  bool consistent = false;
  JudgeSource source = JudgeSource::Rule;
  std::optional<std::string> raw_response;
};

struct JudgeRequest {
  std::string question;
  std::string think;
  std::string answer;

  friend bool operator==(const JudgeRequest&, const JudgeRequest&) = default;
};

/// Consistent iff the last conclusion token in the reasoning names the same
/// answer as the answer token. No conclusion token means inconsistent.
inline JudgeVerdict rule_judge(const PolicyShape& shape, const Rollout& rollout) {
  const int ctx = answer_context(shape, rollout.reasoning);
  return JudgeVerdict{ctx != 0 && ctx - 1 == rollout.answer, JudgeSource::Rule, std::nullopt};
}

inline std::string answer_label(int a) {
  if (a >= 0 && a < 26) return std::string(1, static_cast<char>('A' + a));
  return "option " + std::to_string(a);
}

/// Text rendering of a rollout for the consistency review prompt.
inline JudgeRequest make_request(const PolicyShape& shape, const Observation& obs, const Rollout& r) {
  JudgeRequest req;
  req.question = "For question type " + std::to_string(obs.question_id) +
                 ", which answer does the observation support? Options: ";
  for (int a = 0; a < shape.K; ++a) req.question += (a ? ", " : "") + answer_label(a);
  req.question += ".";

  for (int tok : r.reasoning) {
    if (shape.is_stop(tok)) break;
    if (!req.think.empty()) req.think += " ";
    if (shape.is_conclusion(tok))
      req.think += "The evidence indicates " + answer_label(tok) + ".";
    else
      req.think += "Examining feature group " + std::to_string(tok - shape.K) + ".";
  }
  if (req.think.empty()) req.think = "(no reasoning given)";
  req.answer = answer_label(r.answer);
  return req;
}

inline std::string render_prompt(const JudgeRequest& req) {
  if (req.question.empty() || req.think.empty() || req.answer.empty())
    throw UsageError("render_prompt: question, think and answer must be non-empty");
  std::string out;
  out += "Please review the \"Think\" (thought process) and \"Answer\" provided below. "
         "Referring to the \"Question\" for context, determine if the \"Think\" and \"Answer\" "
         "are consistent.\n\n";
  out += "\"Consistent\" means: The logical reasoning in the \"Think\" process can reasonably "
         "lead to the \"Answer\", and the \"Answer\" aligns with the final conclusion of the "
         "\"Think\" process.\n\n";
  out += "Question: " + req.question + "\n";
  out += "Think: " + req.think + "\n";
  out += "Answer: " + req.answer + "\n\n";
  out += "If they are consistent, please answer: yes\n";
  out += "If they are inconsistent (e.g., the conclusion of the \"Think\" process contradicts "
         "the \"Answer\", or the \"Answer\" is not derived from the \"Think\" process), please "
         "answer: no\n\n";
  out += "Now output your judgement with yes or no directly:";
  return out;
}

/// Lowercases and strips surrounding whitespace and punctuation. Returns
/// "yes" or "no" when the remaining text is exactly that, otherwise nullopt.
inline std::optional<std::string> normalize_verdict(std::string_view raw) {
  std::string s;
  for (char ch : raw) s += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  auto strip = [](unsigned char ch) { return std::isspace(ch) || std::ispunct(ch); };
  const auto first = std::find_if_not(s.begin(), s.end(), strip);
  const auto last = std::find_if_not(s.rbegin(), s.rend(), strip).base();
  if (first >= last) return std::nullopt;
  std::string core(first, last);
  if (core == "yes" || core == "no") return core;
  return std::nullopt;
}

/// Judgment interface used by the optimizer.
class Judge {
 public:
  virtual ~Judge() = default;
  virtual JudgeVerdict judge(const PolicyShape& shape, const Observation& obs, const Rollout& r) = 0;
};

class RuleJudge final : public Judge {
 public:
  JudgeVerdict judge(const PolicyShape& shape, const Observation&, const Rollout& r) override {
    return rule_judge(shape, r);
  }
};

}  // namespace capo
