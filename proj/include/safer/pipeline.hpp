#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "safer/activation_store.hpp"
#include "safer/config.hpp"
#include "safer/contrastive.hpp"
#include "safer/error.hpp"
#include "safer/interpreter.hpp"
#include "safer/manipulation.hpp"
#include "safer/planted.hpp"
#include "safer/sae.hpp"
#include "safer/sae_train.hpp"

namespace safer::pipeline {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kConfigError = 2, kMissingArtifact = 3, kRuntimeFailure = 4 };

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> names = {"synth",       "train-sae",  "score-features",
                                                 "interpret",   "score-pairs", "poison",
                                                 "denoise",     "report"};
  return names;
}

/// Fixed artifact names inside the run directory.
namespace artifact {
inline constexpr const char* kGroundTruth = "ground_truth.json";
inline constexpr const char* kTrainStats = "train_stats.tsv";
inline constexpr const char* kAggregates = "aggregates.bin";
inline constexpr const char* kScores = "scores.jsonl";
inline constexpr const char* kTranscripts = "judge_transcripts.jsonl";
inline constexpr const char* kRatings = "ratings.jsonl";
inline constexpr const char* kSafetySet = "safety_features.json";
inline constexpr const char* kPairScores = "pair_scores.jsonl";
inline constexpr const char* kLock = ".lock";
inline constexpr const char* kMetaDir = "meta";
}  // namespace artifact

using JudgeFactory = std::function<std::unique_ptr<Judge>(const RunConfig&)>;

inline std::unique_ptr<Judge> mock_only_factory(const RunConfig& cfg) {
  if (cfg.judge == "mock") return std::make_unique<MockJudge>(cfg.mock_min_abs_score);
  throw ConfigError("judge '" + cfg.judge + "' is not available in this build");
}

/// Exclusive lock on a run directory; released on destruction.
class RunLock {
 public:
  explicit RunLock(const std::string& run_dir) : path_((std::filesystem::path(run_dir) / artifact::kLock).string()) {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw IoError("run directory is locked by another command (" + path_ + ")");
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    ::close(fd_);
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }

 private:
  std::string path_;
  int fd_ = -1;
};

struct Context {
  const RunConfig& cfg;
  std::ostream& log;
  const JudgeFactory& make_judge;

  std::string in_run(const char* name) const { return cfg.resolve(name); }

  std::string require(const std::string& path, const char* what, const char* producer) const {
    if (!std::filesystem::exists(path))
      throw MissingArtifactError("missing " + std::string(what) + " (" + path + "); run '" +
                                 producer + "' first");
    return path;
  }

  void write_meta(const std::string& command, const text::KeyValues& extra = {}) const {
    const auto dir = std::filesystem::path(cfg.run_dir) / artifact::kMetaDir;
    std::filesystem::create_directories(dir);
    text::KeyValues kv = {{"command", command},
                          {"version", kVersion},
                          {"config_hash", cfg.hash()},
                          {"seed", std::to_string(cfg.seed)}};
    kv.insert(kv.end(), extra.begin(), extra.end());
    for (const auto& [k, v] : cfg.recorded()) kv.emplace_back("config." + k, v);
    text::write_key_values((dir / (command + ".meta")).string(), kv);
  }
};

// ---------------------------------------------------------------------------
// Commands

inline void run_synth(const Context& ctx) {
  const auto& c = ctx.cfg;
  planted::PlantedCorpusSpec spec;
  spec.d = c.synth_d;
  spec.true_atoms = c.synth_true_atoms;
  spec.active_per_sample = c.synth_active_per_sample;
  spec.noise_sigma = c.synth_noise_sigma;
  spec.margin = c.synth_margin;
  spec.safety_atom_pair = {c.synth_safety_pos, c.synth_safety_neg};
  spec.seed = c.seed;
  spec.pretrain_samples = c.synth_pretrain_samples;
  spec.all_tokens = c.synth_all_tokens;
  auto corpus = planted::generate_planted_corpus(spec, c.synth_pairs);

  const std::string label = "planted:seed=" + std::to_string(c.seed);
  write_shard(corpus.pretrain,
              {spec.d, 0, corpus.pretrain.size(), Stage::kPretrain, label},
              c.resolve(c.pretrain_shard));
  write_shard(corpus.preference,
              {spec.d, 0, corpus.preference.size(), Stage::kPreference, label},
              c.resolve(c.preference_shard));
  write_dataset(c.resolve(c.dataset), corpus.dataset);
  planted::write_ground_truth(ctx.in_run(artifact::kGroundTruth), corpus.truth);
  ctx.log << "synth: " << corpus.pretrain.size() << " pretrain vectors, " << corpus.dataset.size()
          << " preference pairs (d=" << spec.d << ")\n";
  ctx.write_meta("synth");
}

inline void write_train_stats(std::ofstream& out, const char* stage, const TrainStats& s) {
  for (std::size_t i = 0; i < s.interval_losses.size(); ++i)
    out << stage << '\t' << i << '\t' << text::format_real(s.interval_losses[i]) << '\n';
}

inline void run_train_sae(const Context& ctx) {
  const auto& c = ctx.cfg;
  const std::vector<std::string> pre = {ctx.require(c.resolve(c.pretrain_shard), "pretrain shard", "synth")};
  if (c.finetune) ctx.require(c.resolve(c.preference_shard), "preference shard", "synth");

  auto [params, pre_stats] = train_stage<float>(c.pretrain_config(), pre, std::nullopt);
  ctx.log << "train-sae: pretrain " << pre_stats.steps << " steps, probe loss "
          << pre_stats.probe_loss_start << " -> " << pre_stats.probe_loss_end << ", dead "
          << pre_stats.dead_features << "\n";
  std::optional<TrainStats> ft_stats;
  if (c.finetune) {
    const std::vector<std::string> pref = {c.resolve(c.preference_shard)};
    auto [tuned, stats] = train_stage<float>(c.finetune_config(), pref, std::move(params));
    params = std::move(tuned);
    ft_stats = stats;
    ctx.log << "train-sae: finetune " << stats.steps << " steps, probe loss "
            << stats.probe_loss_start << " -> " << stats.probe_loss_end << "\n";
  }

  text::KeyValues sidecar = {{"seed", std::to_string(c.seed)},
                             {"config_hash", c.hash()},
                             {"pretrain_lr", text::format_real(c.pretrain_lr)},
                             {"pretrain_batch", std::to_string(c.pretrain_batch)},
                             {"pretrain_steps", std::to_string(pre_stats.steps)},
                             {"pretrain_tokens", std::to_string(pre_stats.tokens_seen)},
                             {"pretrain_dead_features", std::to_string(pre_stats.dead_features)},
                             {"pretrain_probe_loss_end", text::format_real(pre_stats.probe_loss_end)}};
  if (ft_stats) {
    sidecar.emplace_back("finetune_lr", text::format_real(c.finetune_lr));
    sidecar.emplace_back("finetune_batch", std::to_string(c.finetune_batch));
    sidecar.emplace_back("finetune_mode", to_string(c.mode));
    sidecar.emplace_back("finetune_steps", std::to_string(ft_stats->steps));
    sidecar.emplace_back("finetune_dead_features", std::to_string(ft_stats->dead_features));
    sidecar.emplace_back("finetune_probe_loss_end", text::format_real(ft_stats->probe_loss_end));
  }
  save_checkpoint(params, c.resolve(c.checkpoint), sidecar);

  std::ofstream stats(ctx.in_run(artifact::kTrainStats), std::ios::binary | std::ios::trunc);
  stats << "stage\tinterval\tmean_loss\n";
  write_train_stats(stats, "pretrain", pre_stats);
  if (ft_stats) write_train_stats(stats, "finetune", *ft_stats);
  ctx.write_meta("train-sae");
}

inline void run_score_features(const Context& ctx) {
  const auto& c = ctx.cfg;
  const auto ckpt = ctx.require(c.resolve(c.checkpoint), "SAE checkpoint", "train-sae");
  const auto shard = ctx.require(c.resolve(c.preference_shard), "preference shard", "synth");
  const auto params = load_checkpoint(ckpt);
  const auto agg = aggregate(shard, params, c.mode);
  const auto scores = contrastive_scores(agg);
  save_aggregates(ctx.in_run(artifact::kAggregates), agg);
  write_scores(ctx.in_run(artifact::kScores), scores);
  ctx.log << "score-features: " << agg.n_pairs << " pairs, top feature " << scores.ranking.front()
          << " s=" << scores.s[scores.ranking.front()] << "\n";
  ctx.write_meta("score-features");
}

inline void run_interpret(const Context& ctx) {
  const auto& c = ctx.cfg;
  const auto scores_path = ctx.require(ctx.in_run(artifact::kScores), "feature scores", "score-features");
  const auto ckpt = ctx.require(c.resolve(c.checkpoint), "SAE checkpoint", "train-sae");
  const auto shard = ctx.require(c.resolve(c.preference_shard), "preference shard", "synth");
  const auto scores = read_scores(scores_path);
  const auto params = load_checkpoint(ckpt);
  if (scores.s.size() != params.M)
    throw DataError("scores cover " + std::to_string(scores.s.size()) + " features but SAE has " +
                    std::to_string(params.M));

  std::vector<PreferenceTriplet> rows;
  if (std::filesystem::exists(c.resolve(c.dataset))) rows = read_dataset(c.resolve(c.dataset));
  const SnippetSource snippets(rows, c.snippet_tokens);

  const std::size_t top_n = std::min(c.judge_top_n, scores.ranking.size());
  const std::vector<std::uint32_t> candidates(scores.ranking.begin(),
                                              scores.ranking.begin() + static_cast<std::ptrdiff_t>(top_n));
  auto dossiers = collect_top_contexts<float>(candidates, shard, params, c.contexts_per_feature,
                                              c.mode, snippets, &scores);
  const auto before = dossiers.size();
  std::erase_if(dossiers, [](const FeatureDossier& d) { return d.contexts.empty(); });
  if (dossiers.size() != before)
    ctx.log << "interpret: " << (before - dossiers.size()) << " of " << before
            << " candidate features never activate; not judged\n";

  auto judge = ctx.make_judge(c);
  const auto outcome = judge_dossiers(dossiers, *judge, c.judge_parallelism);
  for (const auto& [idx, why] : outcome.unparseable)
    ctx.log << "interpret: feature " << idx << ": " << why << "\n";

  {
    std::ofstream out(ctx.in_run(artifact::kTranscripts), std::ios::binary | std::ios::trunc);
    std::size_t r = 0;
    for (const auto& d : dossiers) {
      nlohmann::ordered_json j;
      j["feature_index"] = d.feature_index;
      j["prompt"] = build_prompt(d);
      while (r < outcome.ratings.size() && outcome.ratings[r].feature_index != d.feature_index) ++r;
      j["response"] = r < outcome.ratings.size() ? outcome.ratings[r].raw_response : "";
      out << j.dump() << '\n';
    }
  }
  write_ratings(ctx.in_run(artifact::kRatings), outcome.ratings, scores);
  const auto set = select_safety_features(outcome.ratings, scores);
  for (const auto& w : set.warnings) ctx.log << "interpret: warning: " << w << "\n";
  write_safety_set(ctx.in_run(artifact::kSafetySet), set);
  ctx.log << "interpret: judged " << outcome.ratings.size() << " features; SI+ " << set.plus.size()
          << ", SI- " << set.minus.size() << "\n";
  ctx.write_meta("interpret", {{"judge", judge->label()}, {"prompt_template", kPromptTemplateVersion}});
}

inline void run_score_pairs(const Context& ctx) {
  const auto& c = ctx.cfg;
  const auto set_path = ctx.require(ctx.in_run(artifact::kSafetySet), "safety feature set", "interpret");
  const auto ckpt = ctx.require(c.resolve(c.checkpoint), "SAE checkpoint", "train-sae");
  const auto shard = ctx.require(c.resolve(c.preference_shard), "preference shard", "synth");
  const auto set = read_safety_set(set_path);
  const auto params = load_checkpoint(ckpt);
  std::vector<PreferenceTriplet> rows;
  if (c.token_basis == TokenBasis::kResponse)
    rows = read_dataset(ctx.require(c.resolve(c.dataset), "preference dataset", "synth"));
  const auto scores = score_pairs(shard, params, set, c.mode, c.token_basis, &rows);
  write_pair_scores(ctx.in_run(artifact::kPairScores), scores);
  ctx.log << "score-pairs: scored " << scores.size() << " pairs\n";
  ctx.write_meta("score-pairs");
}

inline std::string manipulated_dataset_path(const RunConfig& c, ManipulationKind k) {
  return c.resolve(std::string("dataset.") + to_string(k) + ".jsonl");
}

inline std::string manipulation_report_path(const RunConfig& c, ManipulationKind k) {
  return c.resolve(std::string(to_string(k)) + "_report.jsonl");
}

inline void run_manipulation(const Context& ctx, ManipulationKind kind) {
  const auto& c = ctx.cfg;
  const auto scores_path = ctx.require(ctx.in_run(artifact::kPairScores), "pair scores", "score-pairs");
  const auto dataset = ctx.require(c.resolve(c.dataset), "preference dataset", "synth");
  const auto scores = read_pair_scores(scores_path);
  const auto plan = c.selector == "random" ? plan_random(scores, kind, c.rate, c.seed)
                                           : plan_manipulation(scores, kind, c.rate);
  for (const auto& w : plan.warnings) ctx.log << to_string(kind) << ": warning: " << w << "\n";
  const auto written = apply_plan_file(dataset, manipulated_dataset_path(c, kind), plan);
  write_manipulation_report(manipulation_report_path(c, kind), scores, plan);
  ctx.log << to_string(kind) << ": " << plan.affected_ids.size() << " of " << plan.dataset_size
          << " triplets affected; wrote " << written << " records\n";
  ctx.write_meta(to_string(kind), {{"affected", std::to_string(plan.affected_ids.size())},
                                   {"selector", c.selector}});
}

// Report tables are tab-separated with a header row.
inline void run_report(const Context& ctx) {
  const auto& c = ctx.cfg;
  const auto scores = read_scores(ctx.require(ctx.in_run(artifact::kScores), "feature scores", "score-features"));

  std::optional<FeatureAggregates> agg;
  if (std::filesystem::exists(ctx.in_run(artifact::kAggregates))) agg = load_aggregates(ctx.in_run(artifact::kAggregates));
  std::vector<int> rating(scores.s.size(), 0);
  if (std::filesystem::exists(ctx.in_run(artifact::kRatings))) {
    std::ifstream in(ctx.in_run(artifact::kRatings));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const auto idx = j.at("feature_index").get<std::size_t>();
      if (idx < rating.size()) rating[idx] = j.at("rating").get<int>();
    }
  }
  std::set<std::uint32_t> plus, minus;
  if (std::filesystem::exists(ctx.in_run(artifact::kSafetySet))) {
    const auto set = read_safety_set(ctx.in_run(artifact::kSafetySet));
    plus.insert(set.plus.begin(), set.plus.end());
    minus.insert(set.minus.begin(), set.minus.end());
  }

  {
    std::ofstream out(ctx.in_run("report_feature_ranking.tsv"), std::ios::binary | std::ios::trunc);
    out << "abs_rank\tfeature_index\ts\tabs_s\th_plus\th_minus\trating\tsafety_set\n";
    for (std::size_t r = 0; r < scores.ranking.size(); ++r) {
      const auto i = scores.ranking[r];
      out << (r + 1) << '\t' << i << '\t' << text::format_real(scores.s[i]) << '\t'
          << text::format_real(std::abs(scores.s[i])) << '\t'
          << (agg ? text::format_real(agg->h_plus[i]) : "") << '\t'
          << (agg ? text::format_real(agg->h_minus[i]) : "") << '\t'
          << (rating[i] ? std::to_string(rating[i]) : "") << '\t'
          << (plus.count(i) ? "SI+" : minus.count(i) ? "SI-" : "") << '\n';
    }
  }
  {
    // 20 equal-width bins over [-1, 1].
    constexpr int kBins = 20;
    std::vector<std::uint64_t> counts(kBins, 0);
    for (double s : scores.s) {
      int b = static_cast<int>(std::floor((s + 1.0) / 2.0 * kBins));
      counts[static_cast<std::size_t>(std::clamp(b, 0, kBins - 1))]++;
    }
    std::ofstream out(ctx.in_run("report_score_distribution.tsv"), std::ios::binary | std::ios::trunc);
    out << "bin_lo\tbin_hi\tcount\n";
    for (int b = 0; b < kBins; ++b)
      out << text::format_real(-1.0 + 2.0 * b / kBins) << '\t'
          << text::format_real(-1.0 + 2.0 * (b + 1) / kBins) << '\t' << counts[static_cast<std::size_t>(b)] << '\n';
  }
  if (std::filesystem::exists(ctx.in_run(artifact::kPairScores))) {
    const auto pairs = read_pair_scores(ctx.in_run(artifact::kPairScores));
    std::ofstream out(ctx.in_run("report_manipulation.tsv"), std::ios::binary | std::ios::trunc);
    out << "kind\trate\tpairs\taffected\tmean_score_all\tmean_score_affected\tmin_affected\tmax_affected\n";
    double mean_all = 0.0;
    std::unordered_map<std::uint64_t, double> by_id;
    for (const auto& p : pairs) {
      mean_all += p.score_safe / static_cast<double>(pairs.size());
      by_id[p.id] = p.score_safe;
    }
    for (auto kind : {ManipulationKind::kPoison, ManipulationKind::kDenoise}) {
      const auto report = manipulation_report_path(c, kind);
      if (!std::filesystem::exists(report)) continue;
      std::ifstream in(report);
      std::string line;
      std::vector<double> hit;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        if (j.at("action") != "keep") hit.push_back(j.at("score_safe").get<double>());
      }
      const double mean_hit = hit.empty() ? 0.0 : std::accumulate(hit.begin(), hit.end(), 0.0) / hit.size();
      out << to_string(kind) << '\t' << text::format_real(static_cast<double>(hit.size()) / pairs.size()) << '\t'
          << pairs.size() << '\t' << hit.size() << '\t' << text::format_real(mean_all) << '\t'
          << text::format_real(mean_hit) << '\t'
          << (hit.empty() ? "" : text::format_real(*std::min_element(hit.begin(), hit.end()))) << '\t'
          << (hit.empty() ? "" : text::format_real(*std::max_element(hit.begin(), hit.end()))) << '\n';
    }
  }
  ctx.log << "report: wrote tables to " << c.run_dir << "\n";
  ctx.write_meta("report");
}

/// Runs one pipeline verb. Throws safer::Error subclasses on failure; see
/// exit_code_for() for the CLI mapping.
inline void run_command(const std::string& command, const RunConfig& cfg, std::ostream& log,
                        const JudgeFactory& make_judge = mock_only_factory) {
  cfg.validate();
  if (std::find(commands().begin(), commands().end(), command) == commands().end())
    throw ConfigError("unknown command '" + command + "'");
  std::filesystem::create_directories(cfg.run_dir);
  RunLock lock(cfg.run_dir);
  const Context ctx{cfg, log, make_judge};
  if (command == "synth") run_synth(ctx);
  else if (command == "train-sae") run_train_sae(ctx);
  else if (command == "score-features") run_score_features(ctx);
  else if (command == "interpret") run_interpret(ctx);
  else if (command == "score-pairs") run_score_pairs(ctx);
  else if (command == "poison") run_manipulation(ctx, ManipulationKind::kPoison);
  else if (command == "denoise") run_manipulation(ctx, ManipulationKind::kDenoise);
  else run_report(ctx);
}

inline int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::kConfig: return kConfigError;
    case ErrorKind::kMissingArtifact: return kMissingArtifact;
    default: return kRuntimeFailure;
  }
}

/// run_command with errors mapped to exit codes and reported on `log`.
inline int run_command_status(const std::string& command, const RunConfig& cfg, std::ostream& log,
                              const JudgeFactory& make_judge = mock_only_factory) {
  try {
    run_command(command, cfg, log, make_judge);
    return kOk;
  } catch (const Error& e) {
    log << command << ": error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    log << command << ": error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
}

}  // namespace safer::pipeline
