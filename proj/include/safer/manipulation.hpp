#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "safer/activation_store.hpp"
#include "safer/contrastive.hpp"
#include "safer/error.hpp"
#include "safer/interpreter.hpp"
#include "safer/preference_dataset.hpp"
#include "safer/sae.hpp"

namespace safer {

struct PairScore {
  std::uint64_t id = 0;
  double score_safe = 0.0;
  double chosen_margin = 0.0;    // (sum SI+ - sum SI-) / |T+| on the chosen side
  double rejected_margin = 0.0;  // same on the rejected side

  bool operator==(const PairScore&) const = default;
};

/// Which token count normalizes the per-side margins.
enum class TokenBasis { kConcatenated, kResponse };

inline TokenBasis parse_token_basis(std::string_view s) {
  if (s == "concatenated") return TokenBasis::kConcatenated;
  if (s == "response") return TokenBasis::kResponse;
  throw ConfigError("unknown token basis '" + std::string(s) + "'");
}

inline const char* to_string(TokenBasis b) {
  return b == TokenBasis::kConcatenated ? "concatenated" : "response";
}

/// Sum of SI+ strengths minus sum of SI- strengths for one sequence.
inline double safety_margin(std::span<const double> h, const SafetyFeatureSet& safety) {
  double m = 0.0;
  for (auto i : safety.plus) m += h[i];
  for (auto i : safety.minus) m -= h[i];
  return m;
}

/// score_safe for one triplet from its per-side feature strengths.
inline PairScore score_triplet(std::uint64_t id, std::span<const double> h_chosen,
                               std::span<const double> h_rejected, const SafetyFeatureSet& safety,
                               std::uint32_t tokens_chosen, std::uint32_t tokens_rejected) {
  if (safety.empty()) throw DataError("score_triplet: safety feature set is empty");
  if (h_chosen.empty()) throw DataError("score_triplet: missing chosen latents for pair " + std::to_string(id));
  if (h_rejected.empty()) throw DataError("score_triplet: missing rejected latents for pair " + std::to_string(id));
  if (tokens_chosen < 1 || tokens_rejected < 1) throw DataError("score_triplet: token counts must be >= 1");
  for (const auto* set : {&safety.plus, &safety.minus})
    for (auto i : *set)
      if (i >= h_chosen.size() || i >= h_rejected.size())
        throw DimensionError("safety feature " + std::to_string(i) + " out of latent range");
  PairScore ps;
  ps.id = id;
  ps.chosen_margin = safety_margin(h_chosen, safety) / tokens_chosen;
  ps.rejected_margin = safety_margin(h_rejected, safety) / tokens_rejected;
  ps.score_safe = ps.chosen_margin - ps.rejected_margin;
  return ps;
}

/// Scores every pair of a preference shard in one streaming pass. Output
/// follows the order in which pairs complete in the shard.
template <std::floating_point T>
std::vector<PairScore> score_pairs(const std::string& shard_path, const SaeParams<T>& params,
                                   const SafetyFeatureSet& safety, AggregationMode mode,
                                   TokenBasis basis = TokenBasis::kConcatenated,
                                   const std::vector<PreferenceTriplet>* dataset = nullptr) {
  if (safety.empty()) throw DataError("score_pairs: safety feature set is empty");
  std::unordered_map<std::uint64_t, const PreferenceTriplet*> rows;
  if (basis == TokenBasis::kResponse) {
    if (!dataset) throw ConfigError("response token basis needs the preference dataset");
    for (const auto& t : *dataset) rows.emplace(t.id, &t);
  }
  ShardReader reader(shard_path);
  if (reader.manifest().stage != Stage::kPreference)
    throw ConfigError(shard_path + ": pair scoring needs a preference shard");
  if (reader.manifest().dimension != params.d)
    throw DimensionError(shard_path + ": shard dimension != SAE dimension");

  struct Half {
    std::optional<double> margin_sum;
    std::uint32_t tokens = 1;
  };
  struct Pending {
    Half chosen, rejected;
  };
  std::unordered_map<std::uint64_t, Pending> pending;
  std::vector<PairScore> out;
  std::vector<double> h(params.M);
  EncodeWorkspace ws;
  SparseLatent<T> z;
  SequenceRecord rec;
  while (reader.next(rec)) {
    if (rec.role == Role::kGeneric) throw DataError("generic record in preference shard");
    std::fill(h.begin(), h.end(), 0.0);
    accumulate_sequence_latent(rec, params, mode, h, ws, z);
    auto& p = pending[rec.pair_id];
    Half& half = rec.role == Role::kChosen ? p.chosen : p.rejected;
    if (half.margin_sum)
      throw DataError("pair " + std::to_string(rec.pair_id) + " has more than one " + to_string(rec.role) + " record");
    half.margin_sum = safety_margin(h, safety);
    half.tokens = rec.token_count;
    if (basis == TokenBasis::kResponse) {
      auto it = rows.find(rec.pair_id);
      if (it == rows.end()) throw DataError("pair " + std::to_string(rec.pair_id) + " missing from dataset");
      half.tokens = rec.role == Role::kChosen ? it->second->response_tokens_chosen
                                              : it->second->response_tokens_rejected;
    }
    if (p.chosen.margin_sum && p.rejected.margin_sum) {
      PairScore ps;
      ps.id = rec.pair_id;
      ps.chosen_margin = *p.chosen.margin_sum / p.chosen.tokens;
      ps.rejected_margin = *p.rejected.margin_sum / p.rejected.tokens;
      ps.score_safe = ps.chosen_margin - ps.rejected_margin;
      out.push_back(ps);
      pending.erase(rec.pair_id);
    }
  }
  if (!pending.empty()) {
    std::uint64_t worst = std::numeric_limits<std::uint64_t>::max();
    for (const auto& [id, p] : pending) worst = std::min(worst, id);
    throw DataError("pair " + std::to_string(worst) + " is missing its " +
                    (pending[worst].chosen.margin_sum ? "rejected" : "chosen") + " record");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plans

enum class ManipulationKind { kPoison, kDenoise };

inline ManipulationKind parse_kind(std::string_view s) {
  if (s == "poison") return ManipulationKind::kPoison;
  if (s == "denoise") return ManipulationKind::kDenoise;
  throw ConfigError("unknown manipulation kind '" + std::string(s) + "'");
}

inline const char* to_string(ManipulationKind k) {
  return k == ManipulationKind::kPoison ? "poison" : "denoise";
}

struct ManipulationPlan {
  ManipulationKind kind = ManipulationKind::kPoison;
  double rate = 0.0;
  std::vector<std::uint64_t> affected_ids;  // in selection order
  std::uint64_t dataset_size = 0;
  std::vector<std::string> warnings;
};

/// floor(rate * n), tolerant of representation error in `rate` (0.29 * 100
/// must give 29, not 28).
inline std::uint64_t selection_count(double rate, std::uint64_t n) {
  return static_cast<std::uint64_t>(std::floor(rate * static_cast<double>(n) + 1e-9));
}

inline void validate_rate(double rate) {
  if (!(rate > 0.0 && rate < 1.0)) throw ConfigError("rate must be in (0, 1), got " + text::format_real(rate));
}

/// Ranking by descending score_safe, ties by ascending id.
inline std::vector<std::size_t> rank_descending(std::span<const PairScore> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a].score_safe != scores[b].score_safe) return scores[a].score_safe > scores[b].score_safe;
    return scores[a].id < scores[b].id;
  });
  return order;
}

namespace detail {
inline void check_unique_ids(std::span<const PairScore> scores) {
  std::unordered_set<std::uint64_t> seen;
  for (const auto& s : scores)
    if (!seen.insert(s.id).second) throw DataError("duplicate pair id " + std::to_string(s.id) + " in scores");
}
}  // namespace detail

/// Poison: top floor(rate N) of the descending ranking. Denoise: bottom
/// floor(rate N), lowest score first.
inline ManipulationPlan plan_manipulation(std::span<const PairScore> scores, ManipulationKind kind,
                                          double rate) {
  validate_rate(rate);
  if (scores.empty()) throw DataError("plan_manipulation: no scores");
  detail::check_unique_ids(scores);
  ManipulationPlan plan;
  plan.kind = kind;
  plan.rate = rate;
  plan.dataset_size = scores.size();
  const auto k = selection_count(rate, scores.size());
  const auto order = rank_descending(scores);
  for (std::uint64_t i = 0; i < k; ++i) {
    const std::size_t pos = kind == ManipulationKind::kPoison ? i : order.size() - 1 - i;
    plan.affected_ids.push_back(scores[order[pos]].id);
  }
  if (k == 0)
    plan.warnings.push_back("rate " + text::format_real(rate) + " of " + std::to_string(scores.size()) +
                            " pairs selects nothing; plan is empty");
  return plan;
}

/// Seeded uniform selection, the comparison baseline for score-guided plans.
inline ManipulationPlan plan_random(std::span<const PairScore> scores, ManipulationKind kind, double rate,
                                    std::uint64_t seed) {
  validate_rate(rate);
  if (scores.empty()) throw DataError("plan_random: no scores");
  detail::check_unique_ids(scores);
  std::vector<std::uint64_t> ids;
  ids.reserve(scores.size());
  for (const auto& s : scores) ids.push_back(s.id);
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  const auto k = selection_count(rate, ids.size());
  for (std::uint64_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(k);
  ManipulationPlan plan;
  plan.kind = kind;
  plan.rate = rate;
  plan.dataset_size = scores.size();
  plan.affected_ids = std::move(ids);
  if (k == 0) plan.warnings.push_back("random plan is empty");
  return plan;
}

/// Swaps the chosen/rejected sides of a parsed record and toggles `flipped`.
/// Key order is preserved, so flipping twice restores the original bytes.
inline void flip_record(ordered_json& j) {
  auto swap_keys = [&](const char* a, const char* b) {
    const bool ha = j.contains(a), hb = j.contains(b);
    if (ha && hb) std::swap(j[a], j[b]);
  };
  swap_keys("chosen", "rejected");
  swap_keys("tokens_chosen", "tokens_rejected");
  swap_keys("response_tokens_chosen", "response_tokens_rejected");
  j["flipped"] = !j.value("flipped", false);
}

/// Streams `in` to `out` applying the plan. Untouched records are copied
/// byte-for-byte. Returns the number of records written.
inline std::uint64_t apply_plan(std::istream& in, std::ostream& out, const ManipulationPlan& plan) {
  std::unordered_set<std::uint64_t> affected;
  for (auto id : plan.affected_ids)
    if (!affected.insert(id).second) throw DataError("duplicate id " + std::to_string(id) + " in plan");
  std::unordered_set<std::uint64_t> seen;
  std::uint64_t read = 0, written = 0, hit = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("malformed dataset line " + std::to_string(read + 1) + ": " + e.what());
    }
    if (!j.contains("id") || !j["id"].is_number_unsigned())
      throw DataError("dataset line " + std::to_string(read + 1) + " has no integer id");
    const auto id = j["id"].get<std::uint64_t>();
    if (!seen.insert(id).second) throw DataError("duplicate triplet id " + std::to_string(id) + " in dataset");
    ++read;
    if (!affected.count(id)) {
      out << line << '\n';
      ++written;
      continue;
    }
    ++hit;
    if (plan.kind == ManipulationKind::kDenoise) continue;
    flip_record(j);
    out << j.dump() << '\n';
    ++written;
  }
  if (hit != affected.size()) {
    for (auto id : plan.affected_ids)
      if (!seen.count(id)) throw DataError("plan id " + std::to_string(id) + " not found in dataset");
  }
  if (plan.dataset_size != 0 && read != plan.dataset_size)
    throw DataError("plan was built for " + std::to_string(plan.dataset_size) + " triplets but dataset has " +
                    std::to_string(read));
  return written;
}

/// File form of apply_plan; the output appears only if the whole pass succeeds.
inline std::uint64_t apply_plan_file(const std::string& in_path, const std::string& out_path,
                                     const ManipulationPlan& plan) {
  std::ifstream in(in_path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open dataset " + in_path);
  const std::string tmp = out_path + ".tmp";
  std::uint64_t n = 0;
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    try {
      n = apply_plan(in, out, plan);
    } catch (...) {
      out.close();
      std::filesystem::remove(tmp);
      throw;
    }
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, out_path);
  return n;
}

// ---------------------------------------------------------------------------
// Exports

inline void write_pair_scores(const std::string& path, std::span<const PairScore> scores) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& s : scores) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["score_safe"] = s.score_safe;
    j["chosen_margin"] = s.chosen_margin;
    j["rejected_margin"] = s.rejected_margin;
    out << j.dump() << '\n';
  }
}

inline std::vector<PairScore> read_pair_scores(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open pair scores " + path);
  std::vector<PairScore> out;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id"), j.at("score_safe"), j.value("chosen_margin", 0.0),
                     j.value("rejected_margin", 0.0)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": malformed pair scores: " + e.what());
  }
  return out;
}

/// One line per pair in ranking order: id, score_safe, action.
inline void write_manipulation_report(const std::string& path, std::span<const PairScore> scores,
                                      const ManipulationPlan& plan) {
  std::unordered_set<std::uint64_t> affected(plan.affected_ids.begin(), plan.affected_ids.end());
  const char* action = plan.kind == ManipulationKind::kPoison ? "flip" : "remove";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (auto idx : rank_descending(scores)) {
    nlohmann::ordered_json j;
    j["id"] = scores[idx].id;
    j["score_safe"] = scores[idx].score_safe;
    j["action"] = affected.count(scores[idx].id) ? action : "keep";
    out << j.dump() << '\n';
  }
}

}  // namespace safer
