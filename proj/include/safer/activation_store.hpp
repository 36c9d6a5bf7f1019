#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "safer/binary_io.hpp"
#include "safer/error.hpp"
#include "safer/text.hpp"

namespace safer {

enum class Role : std::uint8_t { kGeneric = 0, kChosen = 1, kRejected = 2 };
enum class Stage : std::uint8_t { kPretrain = 0, kPreference = 1 };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::kGeneric: return "generic";
    case Role::kChosen: return "chosen";
    case Role::kRejected: return "rejected";
  }
  return "?";
}

inline const char* to_string(Stage s) {
  return s == Stage::kPretrain ? "pretrain" : "preference";
}

inline Stage parse_stage(std::string_view s) {
  if (s == "pretrain") return Stage::kPretrain;
  if (s == "preference") return Stage::kPreference;
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

/// One sequence of model activations. `values` holds either the final token
/// only (1 x d) or every token (token_count x d, row-major, final token last).
struct SequenceRecord {
  std::uint64_t pair_id = 0;
  Role role = Role::kGeneric;
  std::uint32_t token_count = 1;
  bool has_all_tokens = false;
  std::vector<float> values;

  std::size_t rows() const { return has_all_tokens ? token_count : 1; }
  std::size_t dimension() const { return rows() == 0 ? 0 : values.size() / rows(); }

  std::span<const float> token(std::size_t i) const {
    const std::size_t d = dimension();
    return std::span<const float>(values).subspan(i * d, d);
  }
  std::span<const float> last_token() const { return token(rows() - 1); }

  bool operator==(const SequenceRecord&) const = default;
};

struct ShardManifest {
  std::uint32_t dimension = 0;
  std::uint32_t layer_index = 0;
  std::uint64_t record_count = 0;
  Stage stage = Stage::kPretrain;
  std::string source_label;

  bool operator==(const ShardManifest&) const = default;
};

namespace shard_format {
inline constexpr char kMagic[5] = "SAEA";
inline constexpr std::uint32_t kVersion = 1;
// magic + version + d + record_count + stage
inline constexpr std::size_t kHeaderBytes = 4 + 4 + 4 + 8 + 1;
// pair_id + role + token_count + has_all_tokens
inline constexpr std::size_t kRecordHeaderBytes = 8 + 1 + 4 + 1;
}  // namespace shard_format

inline std::string manifest_path(const std::string& shard_path) {
  return shard_path + ".manifest";
}

/// Throws DimensionError/DataError when `rec` does not fit `m`.
inline void validate_record(const SequenceRecord& rec, const ShardManifest& m) {
  if (rec.token_count < 1) throw DataError("token_count must be >= 1");
  if (rec.values.size() != rec.rows() * m.dimension)
    throw DimensionError("record " + std::to_string(rec.pair_id) + " has " +
                         std::to_string(rec.values.size()) + " values, expected " +
                         std::to_string(rec.rows() * m.dimension));
  if (m.stage == Stage::kPreference && rec.role == Role::kGeneric)
    throw DataError("generic record in preference shard");
  if (m.stage == Stage::kPretrain && rec.role != Role::kGeneric)
    throw DataError("chosen/rejected record in pretrain shard");
  for (float v : rec.values)
    if (!std::isfinite(v))
      throw NumericError("non-finite activation in record " + std::to_string(rec.pair_id));
}

inline void write_manifest_sidecar(const std::string& shard_path, const ShardManifest& m) {
  text::write_key_values(manifest_path(shard_path),
                         {{"d", std::to_string(m.dimension)},
                          {"layer_index", std::to_string(m.layer_index)},
                          {"record_count", std::to_string(m.record_count)},
                          {"stage", to_string(m.stage)},
                          {"source_label", m.source_label}});
}

/// Single-writer streaming shard output. The record count is fixed by the
/// manifest up front; finish() fails if a different number was appended.
class ShardWriter {
 public:
  ShardWriter(const std::string& path, ShardManifest manifest)
      : path_(path), manifest_(std::move(manifest)) {
    if (manifest_.dimension == 0) throw DimensionError("manifest dimension must be positive");
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open " + path + " for writing");
    out_.write(shard_format::kMagic, 4);
    binio::put<std::uint32_t>(out_, shard_format::kVersion);
    binio::put<std::uint32_t>(out_, manifest_.dimension);
    binio::put<std::uint64_t>(out_, manifest_.record_count);
    binio::put<std::uint8_t>(out_, static_cast<std::uint8_t>(manifest_.stage));
    bytes_ = shard_format::kHeaderBytes;
  }

  ShardWriter(const ShardWriter&) = delete;
  ShardWriter& operator=(const ShardWriter&) = delete;

  void append(const SequenceRecord& rec) {
    validate_record(rec, manifest_);
    if (written_ == manifest_.record_count)
      throw DataError("more records than manifest record_count " +
                      std::to_string(manifest_.record_count));
    binio::put<std::uint64_t>(out_, rec.pair_id);
    binio::put<std::uint8_t>(out_, static_cast<std::uint8_t>(rec.role));
    binio::put<std::uint32_t>(out_, rec.token_count);
    binio::put<std::uint8_t>(out_, rec.has_all_tokens ? 1 : 0);
    binio::put_array<float>(out_, rec.values);
    bytes_ += shard_format::kRecordHeaderBytes + rec.values.size() * sizeof(float);
    ++written_;
  }

  /// Flushes the payload and writes the manifest sidecar. Returns the shard
  /// byte count.
  std::uint64_t finish() {
    if (written_ != manifest_.record_count)
      throw DataError("manifest record_count " + std::to_string(manifest_.record_count) +
                      " but " + std::to_string(written_) + " records written");
    out_.flush();
    if (!out_) throw IoError("write failed: " + path_);
    out_.close();
    write_manifest_sidecar(path_, manifest_);
    return bytes_;
  }

 private:
  std::string path_;
  ShardManifest manifest_;
  std::ofstream out_;
  std::uint64_t written_ = 0;
  std::uint64_t bytes_ = 0;
};

inline std::uint64_t write_shard(std::span<const SequenceRecord> records,
                                 const ShardManifest& manifest, const std::string& path) {
  if (manifest.record_count != records.size())
    throw DataError("manifest record_count " + std::to_string(manifest.record_count) +
                    " disagrees with " + std::to_string(records.size()) + " records");
  // Validate everything before touching the file.
  for (const auto& r : records) validate_record(r, manifest);
  ShardWriter writer(path, manifest);
  for (const auto& r : records) writer.append(r);
  return writer.finish();
}

/// Streaming reader. Holds one record's payload at a time; the manifest is
/// available right after construction.
class ShardReader {
 public:
  explicit ShardReader(const std::string& path) : path_(path) { open(); }

  const ShardManifest& manifest() const { return manifest_; }
  const std::string& path() const { return path_; }
  std::uint64_t records_read() const { return read_; }

  /// Reads the next record into `rec`, reusing its storage. Returns false at
  /// end of stream after checking that the count matches the manifest.
  bool next(SequenceRecord& rec) {
    if (read_ == manifest_.record_count) {
      if (in_.peek() != std::char_traits<char>::eof())
        throw FormatError(FormatFault::kCorrupt,
                          path_ + ": trailing bytes after " + std::to_string(read_) + " records");
      return false;
    }
    std::uint8_t role = 0;
    std::uint8_t all = 0;
    if (!binio::get(in_, rec.pair_id) || !binio::get(in_, role) ||
        !binio::get(in_, rec.token_count) || !binio::get(in_, all))
      throw truncated();
    if (role > 2 || all > 1)
      throw FormatError(FormatFault::kCorrupt,
                        path_ + ": corrupt header in record " + std::to_string(read_));
    rec.role = static_cast<Role>(role);
    rec.has_all_tokens = all == 1;
    if (rec.token_count == 0)
      throw FormatError(FormatFault::kCorrupt,
                        path_ + ": zero token_count in record " + std::to_string(read_));
    rec.values.resize(rec.rows() * manifest_.dimension);
    if (!binio::get_array<float>(in_, rec.values)) throw truncated();
    ++read_;
    return true;
  }

  std::optional<SequenceRecord> next() {
    SequenceRecord rec;
    if (!next(rec)) return std::nullopt;
    return rec;
  }

  /// Restart from the first record (multi-epoch training).
  void rewind() {
    in_.close();
    read_ = 0;
    open();
  }

 private:
  FormatError truncated() const {
    return FormatError(FormatFault::kTruncated,
                       path_ + ": truncated payload in record " + std::to_string(read_));
  }

  void open() {
    in_.open(path_, std::ios::binary);
    if (!in_) throw MissingArtifactError("cannot open shard " + path_);
    if (!binio::check_magic(in_, shard_format::kMagic))
      throw FormatError(FormatFault::kBadMagic, path_ + ": bad magic, not an activation shard");
    std::uint32_t version = 0;
    std::uint8_t stage = 0;
    if (!binio::get(in_, version))
      throw FormatError(FormatFault::kTruncated, path_ + ": truncated header");
    if (version != shard_format::kVersion)
      throw FormatError(FormatFault::kUnsupportedVersion,
                        path_ + ": unsupported shard version " + std::to_string(version));
    if (!binio::get(in_, manifest_.dimension) || !binio::get(in_, manifest_.record_count) ||
        !binio::get(in_, stage))
      throw FormatError(FormatFault::kTruncated, path_ + ": truncated header");
    if (stage > 1 || manifest_.dimension == 0)
      throw FormatError(FormatFault::kCorrupt, path_ + ": corrupt header");
    manifest_.stage = static_cast<Stage>(stage);
    load_sidecar();
  }

  void load_sidecar() {
    const auto sidecar = manifest_path(path_);
    if (!std::filesystem::exists(sidecar)) return;
    const auto kv = text::read_key_values(sidecar);
    auto mismatch = [&](const char* key) {
      return FormatError(FormatFault::kCorrupt,
                         sidecar + ": " + key + " disagrees with shard header");
    };
    if (auto* v = text::find_value(kv, "d"))
      if (text::parse_number<std::uint32_t>(*v, "d") != manifest_.dimension) throw mismatch("d");
    if (auto* v = text::find_value(kv, "record_count"))
      if (text::parse_number<std::uint64_t>(*v, "record_count") != manifest_.record_count)
        throw mismatch("record_count");
    if (auto* v = text::find_value(kv, "stage"))
      if (parse_stage(*v) != manifest_.stage) throw mismatch("stage");
    if (auto* v = text::find_value(kv, "layer_index"))
      manifest_.layer_index = text::parse_number<std::uint32_t>(*v, "layer_index");
    if (auto* v = text::find_value(kv, "source_label")) manifest_.source_label = *v;
  }

  std::string path_;
  std::ifstream in_;
  ShardManifest manifest_;
  std::uint64_t read_ = 0;
};

/// Convenience for tests and small shards: materializes every record.
inline std::vector<SequenceRecord> read_all_records(const std::string& path,
                                                    ShardManifest* manifest = nullptr) {
  ShardReader reader(path);
  if (manifest) *manifest = reader.manifest();
  std::vector<SequenceRecord> out;
  SequenceRecord rec;
  while (reader.next(rec)) out.push_back(rec);
  return out;
}

}  // namespace safer
