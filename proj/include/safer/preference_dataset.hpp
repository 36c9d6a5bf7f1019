#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "safer/error.hpp"

namespace safer {

/// (prompt, chosen, rejected) with token counts. `tokens_*` count the
/// concatenated prompt+response sequence the reward model saw;
/// `response_tokens_*` count the response alone.
struct PreferenceTriplet {
  std::uint64_t id = 0;
  std::string prompt;
  std::string chosen;
  std::string rejected;
  bool flipped = false;
  std::uint32_t tokens_chosen = 1;
  std::uint32_t tokens_rejected = 1;
  std::uint32_t response_tokens_chosen = 1;
  std::uint32_t response_tokens_rejected = 1;

  bool operator==(const PreferenceTriplet&) const = default;
};

using ordered_json = nlohmann::ordered_json;

inline ordered_json to_json(const PreferenceTriplet& t) {
  ordered_json j;
  j["id"] = t.id;
  j["prompt"] = t.prompt;
  j["chosen"] = t.chosen;
  j["rejected"] = t.rejected;
  j["flipped"] = t.flipped;
  j["tokens_chosen"] = t.tokens_chosen;
  j["tokens_rejected"] = t.tokens_rejected;
  j["response_tokens_chosen"] = t.response_tokens_chosen;
  j["response_tokens_rejected"] = t.response_tokens_rejected;
  return j;
}

inline PreferenceTriplet triplet_from_json(const ordered_json& j) {
  PreferenceTriplet t;
  try {
    t.id = j.at("id").get<std::uint64_t>();
    t.prompt = j.at("prompt").get<std::string>();
    t.chosen = j.at("chosen").get<std::string>();
    t.rejected = j.at("rejected").get<std::string>();
    t.flipped = j.value("flipped", false);
    t.tokens_chosen = j.value("tokens_chosen", 1u);
    t.tokens_rejected = j.value("tokens_rejected", 1u);
    t.response_tokens_chosen = j.value("response_tokens_chosen", t.tokens_chosen);
    t.response_tokens_rejected = j.value("response_tokens_rejected", t.tokens_rejected);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed preference record: ") + e.what());
  }
  if (t.tokens_chosen < 1 || t.tokens_rejected < 1 || t.response_tokens_chosen < 1 ||
      t.response_tokens_rejected < 1)
    throw DataError("preference record " + std::to_string(t.id) + ": token counts must be >= 1");
  return t;
}

inline std::string serialize_line(const PreferenceTriplet& t) { return to_json(t).dump(); }

inline PreferenceTriplet parse_line(const std::string& line) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("malformed preference line: ") + e.what());
  }
  return triplet_from_json(j);
}

inline void write_dataset(const std::string& path, const std::vector<PreferenceTriplet>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& t : rows) out << serialize_line(t) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

/// Reads a whole dataset, rejecting duplicate ids.
inline std::vector<PreferenceTriplet> read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open dataset " + path);
  std::vector<PreferenceTriplet> rows;
  std::unordered_map<std::uint64_t, std::size_t> seen;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(parse_line(line));
    if (!seen.emplace(rows.back().id, rows.size() - 1).second)
      throw DataError("duplicate triplet id " + std::to_string(rows.back().id));
  }
  return rows;
}

}  // namespace safer
