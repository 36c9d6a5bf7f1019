#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "safer/activation_store.hpp"
#include "safer/binary_io.hpp"
#include "safer/error.hpp"
#include "safer/sae.hpp"
#include "safer/sae_train.hpp"

namespace safer {

/// Dataset-level feature strengths on the chosen (h_plus) and rejected
/// (h_minus) sides.
struct FeatureAggregates {
  std::vector<double> h_plus;
  std::vector<double> h_minus;
  double C = 0.0;
  std::uint64_t n_pairs = 0;

  std::size_t M() const { return h_plus.size(); }
};

/// C = mean over features of (h_plus + h_minus).
inline double normalization_constant(std::span<const double> h_plus, std::span<const double> h_minus) {
  if (h_plus.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < h_plus.size(); ++i) total += h_plus[i] + h_minus[i];
  return total / static_cast<double>(h_plus.size());
}

/// Per-sequence feature strengths: the sum of encoded latents over the
/// tokens selected by `mode`. Adds into `out` (length M); returns the number
/// of token vectors encoded.
template <std::floating_point T>
std::size_t accumulate_sequence_latent(const SequenceRecord& rec, const SaeParams<T>& params,
                                       AggregationMode mode, std::span<double> out,
                                       EncodeWorkspace& ws, SparseLatent<T>& z) {
  std::size_t tokens = 0;
  for_each_token(rec, mode, [&](std::span<const float> x) {
    encode_into(x, params, z, ws);
    // Sum the double pre-activations, not the T-rounded latent values.
    for (std::size_t j = 0; j < z.nnz(); ++j) out[z.index[j]] += ws.pre[z.index[j]];
    ++tokens;
  });
  return tokens;
}

template <std::floating_point T>
std::vector<double> sequence_latent(const SequenceRecord& rec, const SaeParams<T>& params,
                                    AggregationMode mode) {
  std::vector<double> out(params.M, 0.0);
  EncodeWorkspace ws;
  SparseLatent<T> z;
  accumulate_sequence_latent(rec, params, mode, out, ws, z);
  return out;
}

/// Streaming accumulation of h_plus / h_minus with pairing checks. Partial
/// accumulators over disjoint pair sets merge by element-wise addition.
template <std::floating_point T>
class AggregateAccumulator {
 public:
  AggregateAccumulator(const SaeParams<T>& params, AggregationMode mode)
      : params_(params), mode_(mode), h_plus_(params.M, 0.0), h_minus_(params.M, 0.0) {}

  void add(const SequenceRecord& rec) {
    if (rec.dimension() != params_.d)
      throw DimensionError("record dimension " + std::to_string(rec.dimension()) +
                           " != SAE dimension " + std::to_string(params_.d));
    std::uint8_t bit = 0;
    std::vector<double>* target = nullptr;
    if (rec.role == Role::kChosen) {
      bit = 1;
      target = &h_plus_;
    } else if (rec.role == Role::kRejected) {
      bit = 2;
      target = &h_minus_;
    } else {
      throw DataError("generic record in preference aggregation (pair " +
                      std::to_string(rec.pair_id) + ")");
    }
    auto& seen = roles_[rec.pair_id];
    if (seen & bit)
      throw DataError("pair " + std::to_string(rec.pair_id) + " has more than one " +
                      to_string(rec.role) + " record");
    seen |= bit;
    accumulate_sequence_latent(rec, params_, mode_, *target, ws_, z_);
  }

  void merge(const AggregateAccumulator& other) {
    for (const auto& [id, bits] : other.roles_) {
      auto& seen = roles_[id];
      if (seen & bits) throw DataError("pair " + std::to_string(id) + " appears in two partitions");
      seen |= bits;
    }
    for (std::size_t i = 0; i < h_plus_.size(); ++i) {
      h_plus_[i] += other.h_plus_[i];
      h_minus_[i] += other.h_minus_[i];
    }
  }

  FeatureAggregates finish() const {
    if (roles_.empty()) throw DataError("empty preference stream: nothing to aggregate");
    for (const auto& [id, bits] : roles_)
      if (bits != 3)
        throw DataError("unpaired pair_id " + std::to_string(id) + ": missing " +
                        (bits == 1 ? "rejected" : "chosen") + " record");
    FeatureAggregates agg;
    agg.h_plus = h_plus_;
    agg.h_minus = h_minus_;
    agg.n_pairs = roles_.size();
    agg.C = normalization_constant(agg.h_plus, agg.h_minus);
    return agg;
  }

 private:
  const SaeParams<T>& params_;
  AggregationMode mode_;
  std::vector<double> h_plus_;
  std::vector<double> h_minus_;
  std::unordered_map<std::uint64_t, std::uint8_t> roles_;
  EncodeWorkspace ws_;
  SparseLatent<T> z_;
};

/// One streaming pass over a preference shard.
template <std::floating_point T>
FeatureAggregates aggregate(ShardReader& reader, const SaeParams<T>& params, AggregationMode mode) {
  if (reader.manifest().stage != Stage::kPreference)
    throw ConfigError(reader.path() + ": aggregation needs a preference shard");
  if (reader.manifest().dimension != params.d)
    throw DimensionError(reader.path() + ": shard dimension " +
                         std::to_string(reader.manifest().dimension) + " != SAE dimension " +
                         std::to_string(params.d));
  AggregateAccumulator<T> acc(params, mode);
  SequenceRecord rec;
  while (reader.next(rec)) acc.add(rec);
  return acc.finish();
}

template <std::floating_point T>
FeatureAggregates aggregate(const std::string& shard_path, const SaeParams<T>& params,
                            AggregationMode mode) {
  ShardReader reader(shard_path);
  return aggregate(reader, params, mode);
}

struct ContrastiveScores {
  std::vector<double> s;
  std::vector<std::uint32_t> ranking;  // feature indices by descending |s|, ties to lower index
};

/// s_i = (h+_i - h-_i) / (h+_i + h-_i + C).
inline ContrastiveScores contrastive_scores(const FeatureAggregates& agg) {
  if (agg.n_pairs < 1) throw DataError("contrastive scores need at least one pair");
  if (agg.h_minus.size() != agg.h_plus.size()) throw DimensionError("aggregate vectors differ in length");
  ContrastiveScores out;
  out.s.resize(agg.M());
  bool any = false;
  for (std::size_t i = 0; i < agg.M(); ++i) {
    const double denom = agg.h_plus[i] + agg.h_minus[i] + agg.C;
    if (denom != 0.0) any = true;
    out.s[i] = denom == 0.0 ? 0.0 : (agg.h_plus[i] - agg.h_minus[i]) / denom;
  }
  if (!any) throw NumericError("degenerate aggregates: no feature ever activated");
  out.ranking.resize(agg.M());
  std::iota(out.ranking.begin(), out.ranking.end(), 0u);
  std::stable_sort(out.ranking.begin(), out.ranking.end(), [&](std::uint32_t a, std::uint32_t b) {
    return std::abs(out.s[a]) > std::abs(out.s[b]);
  });
  return out;
}

struct SignedPartition {
  std::vector<std::uint32_t> plus;
  std::vector<std::uint32_t> minus;
  std::vector<std::uint32_t> zero_excluded;
};

/// Splits `indices` by the sign of s. Exact zeros land in neither set.
inline SignedPartition partition_signed(std::span<const std::uint32_t> indices,
                                        const ContrastiveScores& scores) {
  SignedPartition out;
  for (auto i : indices) {
    if (i >= scores.s.size())
      throw DimensionError("feature index " + std::to_string(i) + " out of range");
    const double v = scores.s[i];
    if (v > 0.0) out.plus.push_back(i);
    else if (v < 0.0) out.minus.push_back(i);
    else out.zero_excluded.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exports

/// One JSON object per line, in rank order: feature_index, s, abs_rank (1-based).
inline void write_scores(const std::string& path, const ContrastiveScores& scores) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (std::size_t r = 0; r < scores.ranking.size(); ++r) {
    nlohmann::ordered_json j;
    j["feature_index"] = scores.ranking[r];
    j["s"] = scores.s[scores.ranking[r]];
    j["abs_rank"] = r + 1;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

inline ContrastiveScores read_scores(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open scores " + path);
  std::vector<std::pair<std::uint64_t, std::pair<std::uint32_t, double>>> rows;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      rows.push_back({j.at("abs_rank").get<std::uint64_t>(),
                      {j.at("feature_index").get<std::uint32_t>(), j.at("s").get<double>()}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": malformed scores: " + e.what());
  }
  ContrastiveScores out;
  out.s.assign(rows.size(), 0.0);
  out.ranking.assign(rows.size(), 0);
  std::vector<std::uint8_t> seen(rows.size(), 0);
  for (const auto& [rank, entry] : rows) {
    const auto [idx, s] = entry;
    if (rank < 1 || rank > rows.size() || idx >= rows.size() || seen[idx])
      throw DataError(path + ": scores are not a permutation of feature indices");
    seen[idx] = 1;
    out.s[idx] = s;
    out.ranking[rank - 1] = idx;
  }
  return out;
}

namespace aggregates_format {
inline constexpr char kMagic[5] = "SAEG";
inline constexpr std::uint32_t kVersion = 1;
}  // namespace aggregates_format

/// Binary aggregates: magic "SAEG", version u32, M u32, n_pairs u64, C f64,
/// h_plus f64 x M, h_minus f64 x M, all little-endian.
inline void save_aggregates(const std::string& path, const FeatureAggregates& agg) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(aggregates_format::kMagic, 4);
  binio::put<std::uint32_t>(out, aggregates_format::kVersion);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(agg.M()));
  binio::put<std::uint64_t>(out, agg.n_pairs);
  binio::put<double>(out, agg.C);
  binio::put_array<double>(out, agg.h_plus);
  binio::put_array<double>(out, agg.h_minus);
  if (!out) throw IoError("write failed: " + path);
}

inline FeatureAggregates load_aggregates(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open aggregates " + path);
  if (!binio::check_magic(in, aggregates_format::kMagic))
    throw FormatError(FormatFault::kBadMagic, path + ": bad magic, not an aggregates file");
  std::uint32_t version = 0, M = 0;
  FeatureAggregates agg;
  if (!binio::get(in, version)) throw FormatError(FormatFault::kTruncated, path + ": truncated header");
  if (version != aggregates_format::kVersion)
    throw FormatError(FormatFault::kUnsupportedVersion, path + ": unsupported version");
  if (!binio::get(in, M) || !binio::get(in, agg.n_pairs) || !binio::get(in, agg.C))
    throw FormatError(FormatFault::kTruncated, path + ": truncated header");
  agg.h_plus.resize(M);
  agg.h_minus.resize(M);
  if (!binio::get_array<double>(in, agg.h_plus) || !binio::get_array<double>(in, agg.h_minus))
    throw FormatError(FormatFault::kTruncated, path + ": truncated payload");
  return agg;
}

}  // namespace safer
