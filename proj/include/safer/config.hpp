#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "safer/error.hpp"
#include "safer/manipulation.hpp"
#include "safer/sae_train.hpp"
#include "safer/text.hpp"

namespace safer {

/// Every knob of a pipeline run. Serialized as flat key=value text; see
/// RunConfig::fields() for the schema.
struct RunConfig {
  std::string run_dir = "run";
  std::uint64_t seed = 0;

  // Artifact paths, relative to run_dir unless absolute.
  std::string pretrain_shard = "pretrain.shard";
  std::string preference_shard = "preference.shard";
  std::string dataset = "dataset.jsonl";
  std::string checkpoint = "sae.ckpt";

  // Synthetic planted corpus.
  std::uint32_t synth_d = 32;
  std::uint32_t synth_true_atoms = 16;
  std::uint32_t synth_active_per_sample = 3;
  double synth_noise_sigma = 0.05;
  double synth_margin = 2.0;
  std::uint32_t synth_safety_pos = 0;
  std::uint32_t synth_safety_neg = 1;
  std::uint64_t synth_pairs = 500;
  std::uint64_t synth_pretrain_samples = 100000;
  bool synth_all_tokens = false;

  // SAE. Defaults follow the reference setup (K=64, M=16384, 8x expansion).
  std::size_t sae_dictionary_size = 16384;
  std::size_t sae_k = 64;
  double pretrain_lr = 5e-4;
  std::size_t pretrain_batch = 16;
  std::uint64_t pretrain_epochs = 1;
  std::uint64_t pretrain_token_budget = 0;
  bool finetune = true;
  double finetune_lr = 3e-4;
  std::size_t finetune_batch = 8;
  std::uint64_t finetune_epochs = 1;
  AggregationMode mode = AggregationMode::kLastToken;

  // Interpretation.
  std::string judge = "mock";
  std::size_t judge_top_n = 100;
  std::size_t contexts_per_feature = 16;
  std::size_t snippet_tokens = 64;
  std::string judge_url;
  std::string judge_key;  // never written to metadata
  double judge_timeout = 60.0;
  int judge_max_retries = 3;
  std::size_t judge_parallelism = 4;
  double mock_min_abs_score = MockJudge::kDefaultMinAbsScore;  // mock judge: |s| needed for a rating of 5

  // Manipulation.
  ManipulationKind kind = ManipulationKind::kPoison;
  double rate = 0.05;
  std::string selector = "score";
  TokenBasis token_basis = TokenBasis::kConcatenated;

  struct Field {
    const char* key;
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
    bool recorded = true;  // part of metadata and the config hash
  };

  static const std::vector<Field>& fields() {
    using text::format_real;
    using text::parse_number;
#define SAFER_NUM(name)                                                              \
  Field {                                                                            \
    #name, [](RunConfig& c, std::string_view v) {                                    \
      c.name = parse_number<decltype(c.name)>(v, #name);                             \
    },                                                                               \
        [](const RunConfig& c) { return std::to_string(c.name); }                    \
  }
#define SAFER_REAL(name)                                                             \
  Field {                                                                            \
    #name, [](RunConfig& c, std::string_view v) { c.name = parse_number<double>(v, #name); }, \
        [](const RunConfig& c) { return format_real(c.name); }                       \
  }
#define SAFER_STR(name)                                                              \
  Field {                                                                            \
    #name, [](RunConfig& c, std::string_view v) { c.name = std::string(v); },        \
        [](const RunConfig& c) { return c.name; }                                    \
  }
#define SAFER_BOOL(name)                                                             \
  Field {                                                                            \
    #name, [](RunConfig& c, std::string_view v) { c.name = parse_bool(v, #name); },  \
        [](const RunConfig& c) { return std::string(c.name ? "true" : "false"); }    \
  }
    static const std::vector<Field> table = [] {
      std::vector<Field> f = {
          SAFER_STR(run_dir),
          SAFER_NUM(seed),
          SAFER_STR(pretrain_shard),
          SAFER_STR(preference_shard),
          SAFER_STR(dataset),
          SAFER_STR(checkpoint),
          SAFER_NUM(synth_d),
          SAFER_NUM(synth_true_atoms),
          SAFER_NUM(synth_active_per_sample),
          SAFER_REAL(synth_noise_sigma),
          SAFER_REAL(synth_margin),
          SAFER_NUM(synth_safety_pos),
          SAFER_NUM(synth_safety_neg),
          SAFER_NUM(synth_pairs),
          SAFER_NUM(synth_pretrain_samples),
          SAFER_BOOL(synth_all_tokens),
          SAFER_NUM(sae_dictionary_size),
          SAFER_NUM(sae_k),
          SAFER_REAL(pretrain_lr),
          SAFER_NUM(pretrain_batch),
          SAFER_NUM(pretrain_epochs),
          SAFER_NUM(pretrain_token_budget),
          SAFER_BOOL(finetune),
          SAFER_REAL(finetune_lr),
          SAFER_NUM(finetune_batch),
          SAFER_NUM(finetune_epochs),
          {"mode", [](RunConfig& c, std::string_view v) { c.mode = parse_aggregation_mode(v); },
           [](const RunConfig& c) { return std::string(to_string(c.mode)); }},
          SAFER_STR(judge),
          SAFER_NUM(judge_top_n),
          SAFER_NUM(contexts_per_feature),
          SAFER_NUM(snippet_tokens),
          SAFER_STR(judge_url),
          SAFER_STR(judge_key),
          SAFER_REAL(judge_timeout),
          SAFER_NUM(judge_max_retries),
          SAFER_NUM(judge_parallelism),
          SAFER_REAL(mock_min_abs_score),
          {"kind", [](RunConfig& c, std::string_view v) { c.kind = parse_kind(v); },
           [](const RunConfig& c) { return std::string(to_string(c.kind)); }},
          SAFER_REAL(rate),
          SAFER_STR(selector),
          {"token_basis", [](RunConfig& c, std::string_view v) { c.token_basis = parse_token_basis(v); },
           [](const RunConfig& c) { return std::string(to_string(c.token_basis)); }},
      };
      for (auto& field : f) {
        const std::string_view k = field.key;
        if (k == "run_dir" || k == "judge_key") field.recorded = false;
      }
      return f;
    }();
#undef SAFER_NUM
#undef SAFER_REAL
#undef SAFER_STR
#undef SAFER_BOOL
    return table;
  }

  static bool parse_bool(std::string_view v, std::string_view what) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("invalid boolean for " + std::string(what) + ": '" + std::string(v) + "'");
  }

  void set(std::string_view key, std::string_view value) {
    for (const auto& f : fields())
      if (key == f.key) {
        f.set(*this, value);
        return;
      }
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }

  void apply(const text::KeyValues& kv) {
    for (const auto& [k, v] : kv) set(k, v);
  }

  static RunConfig load(const std::string& path) {
    RunConfig c;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    c.apply(text::parse_key_values(in, path));
    return c;
  }

  /// Recorded keys in schema order.
  text::KeyValues recorded() const {
    text::KeyValues kv;
    for (const auto& f : fields())
      if (f.recorded) kv.emplace_back(f.key, f.get(*this));
    return kv;
  }

  std::string hash() const {
    std::string canon;
    for (const auto& [k, v] : recorded()) canon += k + "=" + v + "\n";
    return text::hex64(text::fnv1a(canon));
  }

  std::string resolve(const std::string& p) const {
    const std::filesystem::path path(p);
    if (path.is_absolute()) return p;
    return (std::filesystem::path(run_dir) / path).string();
  }

  void validate() const {
    if (run_dir.empty()) throw ConfigError("run_dir must not be empty");
    validate_rate(rate);
    if (sae_dictionary_size == 0 || sae_k == 0 || sae_k > sae_dictionary_size)
      throw ConfigError("sae_k must be in [1, sae_dictionary_size]");
    if (pretrain_batch == 0 || finetune_batch == 0) throw ConfigError("batch sizes must be positive");
    if (!(pretrain_lr > 0.0) || !(finetune_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (pretrain_epochs == 0 || finetune_epochs == 0) throw ConfigError("epochs must be positive");
    if (judge != "mock" && judge != "remote") throw ConfigError("judge must be mock or remote");
    if (selector != "score" && selector != "random") throw ConfigError("selector must be score or random");
    if (judge_top_n == 0 || contexts_per_feature == 0 || snippet_tokens == 0)
      throw ConfigError("judge_top_n, contexts_per_feature and snippet_tokens must be positive");
    if (synth_pairs == 0) throw ConfigError("synth_pairs must be positive");
  }

  TrainConfig pretrain_config() const {
    auto c = TrainConfig::defaults(TrainStage::kPretrain);
    c.learning_rate = pretrain_lr;
    c.batch_size = pretrain_batch;
    c.epochs = pretrain_epochs;
    c.token_budget = pretrain_token_budget;
    c.seed = seed;
    c.dictionary_size = sae_dictionary_size;
    c.k = sae_k;
    c.aggregation = AggregationMode::kAllTokens;  // stage 1 learns from every token
    return c;
  }

  TrainConfig finetune_config() const {
    auto c = TrainConfig::defaults(TrainStage::kFinetune);
    c.learning_rate = finetune_lr;
    c.batch_size = finetune_batch;
    c.epochs = finetune_epochs;
    c.seed = seed;
    c.aggregation = mode;
    return c;
  }
};

}  // namespace safer
