#pragma once

// Line-delimited JSON records, one TaskItem per line:
//   {"item_id":..,"features":[..],"question_id":..,"gold_answer":..,
//    "prior_answer":..,"difficulty":1|2|3}

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "capo/env.hpp"
#include "capo/errors.hpp"

namespace capo {

inline nlohmann::json item_to_json(const TaskItem& item) {
  return nlohmann::json{{"item_id", item.item_id},
                        {"features", item.observation.features},
                        {"question_id", item.observation.question_id},
                        {"gold_answer", item.gold_answer},
                        {"prior_answer", item.prior_answer},
                        {"difficulty", static_cast<int>(item.difficulty)}};
}

inline TaskItem item_from_json(const nlohmann::json& j) {
  TaskItem item;
  try {
    item.item_id = j.at("item_id").get<std::uint64_t>();
    item.observation.features = j.at("features").get<std::vector<double>>();
    item.observation.question_id = j.at("question_id").get<int>();
    item.gold_answer = j.at("gold_answer").get<int>();
    item.prior_answer = j.at("prior_answer").get<int>();
    const int level = j.at("difficulty").get<int>();
    if (level < 1 || level > 3) throw IoError("difficulty must be 1, 2 or 3");
    item.difficulty = static_cast<Difficulty>(level);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed dataset record: ") + e.what());
  }
  return item;
}

inline void write_items(const std::string& path, const std::vector<TaskItem>& items) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& item : items) out << item_to_json(item).dump() << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<TaskItem> read_items(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<TaskItem> items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      items.push_back(item_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return items;
}

}  // namespace capo
