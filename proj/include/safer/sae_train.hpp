#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "safer/activation_store.hpp"
#include "safer/error.hpp"
#include "safer/sae.hpp"

namespace safer {

enum class TrainStage { kPretrain, kFinetune };

/// Which token activations of a sequence feed training and aggregation.
enum class AggregationMode { kLastToken, kAllTokens };

inline const char* to_string(TrainStage s) { return s == TrainStage::kPretrain ? "pretrain" : "finetune"; }
inline const char* to_string(AggregationMode m) {
  return m == AggregationMode::kLastToken ? "last_token" : "all_tokens";
}

inline AggregationMode parse_aggregation_mode(std::string_view s) {
  if (s == "last_token") return AggregationMode::kLastToken;
  if (s == "all_tokens") return AggregationMode::kAllTokens;
  throw ConfigError("unknown aggregation mode '" + std::string(s) + "'");
}

struct TrainConfig {
  TrainStage stage = TrainStage::kPretrain;
  double learning_rate = 5e-4;
  std::size_t batch_size = 16;
  std::uint64_t epochs = 1;
  std::uint64_t token_budget = 0;  // 0: no cap beyond epochs
  std::uint64_t seed = 0;
  AggregationMode aggregation = AggregationMode::kLastToken;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Shape of a freshly initialized dictionary; ignored when params are given.
  std::size_t dictionary_size = 16384;
  std::size_t k = 64;
  std::uint64_t log_interval = 1000;  // steps per reported loss
  std::uint64_t dead_window = 100000; // samples
  std::size_t probe_size = 1024;

  static TrainConfig defaults(TrainStage stage) {
    TrainConfig c;
    c.stage = stage;
    if (stage == TrainStage::kFinetune) {
      c.learning_rate = 3e-4;
      c.batch_size = 8;
    }
    return c;
  }

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (log_interval == 0) throw ConfigError("log_interval must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(epsilon > 0.0))
      throw ConfigError("invalid optimizer moments");
  }
};

struct TrainStats {
  std::vector<double> interval_losses;  // mean batch loss per log_interval steps
  std::uint64_t dead_features = 0;
  std::uint64_t tokens_seen = 0;
  std::uint64_t steps = 0;
  double probe_loss_start = 0.0;  // loss on the first probe_size vectors before training
  double probe_loss_end = 0.0;
};

/// Calls `fn(span<const float>)` for each token vector `rec` contributes under
/// `mode`.
template <typename Fn>
void for_each_token(const SequenceRecord& rec, AggregationMode mode, Fn&& fn) {
  if (mode == AggregationMode::kLastToken) {
    fn(rec.last_token());
    return;
  }
  if (!rec.has_all_tokens && rec.token_count > 1)
    throw DataError("all_tokens mode needs per-token payloads; record " +
                    std::to_string(rec.pair_id) + " stores the final token only");
  for (std::size_t t = 0; t < rec.rows(); ++t) fn(rec.token(t));
}

namespace detail {

inline Stage expected_shard_stage(TrainStage s) {
  return s == TrainStage::kPretrain ? Stage::kPretrain : Stage::kPreference;
}

/// Pulls up to `n` training vectors from the head of the first shard.
inline std::vector<float> read_probe(const std::string& path, AggregationMode mode, std::size_t n,
                                     std::size_t d) {
  std::vector<float> out;
  ShardReader reader(path);
  SequenceRecord rec;
  while (out.size() < n * d && reader.next(rec))
    for_each_token(rec, mode, [&](std::span<const float> x) {
      if (out.size() < n * d) out.insert(out.end(), x.begin(), x.end());
    });
  return out;
}

}  // namespace detail

/// One training stage over `shard_paths`. Pretraining may start from scratch
/// (params empty); fine-tuning requires pretrained params. Decoder columns
/// are renormalized after every step. Deterministic for fixed inputs.
template <std::floating_point T = float>
std::pair<SaeParams<T>, TrainStats> train_stage(const TrainConfig& config,
                                                std::span<const std::string> shard_paths,
                                                std::optional<SaeParams<T>> params) {
  config.validate();
  if (shard_paths.empty()) throw ConfigError("train_stage: no shards given");

  std::uint32_t d = 0;
  for (const auto& path : shard_paths) {
    ShardReader probe(path);
    const auto& m = probe.manifest();
    if (m.stage != detail::expected_shard_stage(config.stage))
      throw ConfigError("stage mismatch: " + std::string(to_string(config.stage)) +
                        " training cannot consume " + to_string(m.stage) + " shard " + path);
    if (d != 0 && m.dimension != d)
      throw DimensionError("shards disagree on dimension: " + std::to_string(d) + " vs " +
                           std::to_string(m.dimension));
    d = m.dimension;
  }

  const auto probe = detail::read_probe(shard_paths.front(), config.aggregation,
                                        config.probe_size, d);
  const RowsView<float> probe_view{probe, d};

  if (!params) {
    if (config.stage == TrainStage::kFinetune)
      throw ConfigError("fine-tuning requires pretrained parameters");
    params = init_params<T>(d, config.dictionary_size, config.k, config.seed, probe_view);
  }
  SaeParams<T>& p = *params;
  if (p.d != d)
    throw DimensionError("shard dimension " + std::to_string(d) + " != SAE input dimension " +
                         std::to_string(p.d));

  TrainStats stats;
  if (probe_view.rows() > 0) stats.probe_loss_start = loss(probe_view, p);

  AdamOptimizer<T> opt(p, {config.learning_rate, config.beta1, config.beta2, config.epsilon});
  SaeGradients<T> grad;
  std::vector<std::uint8_t> fired;
  constexpr std::uint64_t kNever = std::numeric_limits<std::uint64_t>::max();
  std::vector<std::uint64_t> last_fired(p.M, kNever);
  std::vector<float> batch;
  batch.reserve(config.batch_size * d);
  double interval_sum = 0.0;
  std::uint64_t interval_steps = 0;
  bool budget_hit = false;

  auto run_step = [&] {
    const RowsView<float> view{batch, d};
    const double l = loss_and_gradients(view, p, grad, &fired);
    if (!std::isfinite(l))
      throw NumericError("non-finite loss at step " + std::to_string(stats.steps) +
                         " (tokens seen " + std::to_string(stats.tokens_seen) +
                         ", lr " + text::format_real(config.learning_rate) + ")");
    opt.step(p, grad);
    normalize_decoder(p);
    stats.tokens_seen += view.rows();
    ++stats.steps;
    for (std::size_t i = 0; i < p.M; ++i)
      if (fired[i]) last_fired[i] = stats.tokens_seen;
    interval_sum += l;
    if (++interval_steps == config.log_interval) {
      stats.interval_losses.push_back(interval_sum / static_cast<double>(interval_steps));
      interval_sum = 0.0;
      interval_steps = 0;
    }
    batch.clear();
  };

  SequenceRecord rec;
  for (std::uint64_t epoch = 0; epoch < config.epochs && !budget_hit; ++epoch) {
    for (const auto& path : shard_paths) {
      ShardReader reader(path);
      while (!budget_hit && reader.next(rec)) {
        for_each_token(rec, config.aggregation, [&](std::span<const float> x) {
          if (budget_hit) return;
          batch.insert(batch.end(), x.begin(), x.end());
          if (batch.size() == config.batch_size * d) run_step();
          if (config.token_budget != 0 &&
              stats.tokens_seen + batch.size() / d >= config.token_budget)
            budget_hit = true;
        });
      }
      if (budget_hit) break;
    }
  }
  if (!batch.empty()) run_step();
  if (interval_steps > 0)
    stats.interval_losses.push_back(interval_sum / static_cast<double>(interval_steps));

  for (std::size_t i = 0; i < p.M; ++i) {
    const bool never = last_fired[i] == kNever;
    if (never || stats.tokens_seen - last_fired[i] >= config.dead_window) ++stats.dead_features;
  }
  if (probe_view.rows() > 0) stats.probe_loss_end = loss(probe_view, p);
  return {std::move(p), std::move(stats)};
}

}  // namespace safer
