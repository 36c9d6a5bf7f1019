// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "safer/contrastive.hpp"
#include "safer/manipulation.hpp"
#include "safer/pipeline.hpp"
#include "safer/planted.hpp"
#include "safer/sae.hpp"
#include "safer/sae_train.hpp"
#include "test_util.hpp"

namespace safer::acceptance {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 3) {
  std::ostringstream o;
  o.precision(prec);
  o << v;
  return o.str();
}

// Dense straight-line TopK: full pre-activation vector and a full stable sort.
template <typename T, typename In>
std::vector<double> dense_latent(std::span<const In> x, const SaeParams<T>& p) {
  std::vector<double> pre(p.M, 0.0);
  for (std::size_t i = 0; i < p.M; ++i)
    for (std::size_t k = 0; k < p.d; ++k)
      pre[i] += double(p.enc[i * p.d + k]) * (double(x[k]) - double(p.b_pre[k]));
  std::vector<std::size_t> order(p.M);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return pre[a] > pre[b]; });
  std::vector<double> z(p.M, 0.0);
  for (std::size_t j = 0; j < p.K; ++j)
    if (pre[order[j]] > 0) z[order[j]] = pre[order[j]];
  return z;
}

Outcome topk_contract() {
  const std::size_t d = 32, M = 64, K = 8, n = 100000;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal(0, 1);
  std::uniform_real_distribution<double> shift(-4.0, 4.0);
  // Encoder rows share a direction u, so inputs pushed along -u have few
  // positive pre-activations and inputs along +u have many.
  std::vector<double> u(d);
  for (auto& v : u) v = normal(rng) / std::sqrt(double(d));
  SaeParams<float> p(d, M, K);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < d; ++k) p.enc[i * d + k] = static_cast<float>(3 * u[k] + 0.5 * normal(rng));
  for (auto& v : p.b_pre) v = static_cast<float>(0.1 * normal(rng));
  EncodeWorkspace ws;
  SparseLatent<float> z;
  std::vector<float> x(d);
  std::size_t violations = 0, exact_k = 0, under_k = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const double a = shift(rng);
    for (std::size_t k = 0; k < d; ++k) x[k] = static_cast<float>(normal(rng) + a * u[k] * std::sqrt(double(d)));
    encode_into<float, float>(x, p, z, ws);
    std::size_t positive = 0;
    for (std::size_t i = 0; i < M; ++i) {
      double pre = 0;
      for (std::size_t k = 0; k < d; ++k) pre += double(p.enc[i * d + k]) * (double(x[k]) - double(p.b_pre[k]));
      positive += pre > 0;
    }
    std::size_t nonzero = 0;
    for (float v : z.dense()) nonzero += v != 0.0f;
    if (nonzero > K || (positive >= K && nonzero != K)) ++violations;
    exact_k += nonzero == K;
    under_k += positive < K;
  }
  return {violations == 0, std::to_string(n) + " inputs (" + std::to_string(under_k) +
                               " with fewer than K positive pre-activations), " + std::to_string(violations) +
                               " violations, " + std::to_string(exact_k) + " with exactly K nonzeros"};
}

double oracle_loss(const std::vector<double>& batch, const SaeParams<double>& p) {
  const std::size_t n = batch.size() / p.d;
  double total = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const auto x = std::span<const double>(batch).subspan(s * p.d, p.d);
    const auto z = dense_latent(x, p);
    for (std::size_t k = 0; k < p.d; ++k) {
      double xhat = p.b_pre[k];
      for (std::size_t i = 0; i < p.M; ++i) xhat += p.dec[i * p.d + k] * z[i];
      total += (xhat - x[k]) * (xhat - x[k]);
    }
  }
  return total / n;
}

std::vector<std::vector<std::uint32_t>> masks(const std::vector<double>& batch, const SaeParams<double>& p) {
  std::vector<std::vector<std::uint32_t>> out;
  for (std::size_t s = 0; s < batch.size() / p.d; ++s) {
    const auto z = dense_latent(std::span<const double>(batch).subspan(s * p.d, p.d), p);
    std::vector<std::uint32_t> idx;
    for (std::size_t i = 0; i < p.M; ++i)
      if (z[i] != 0) idx.push_back(static_cast<std::uint32_t>(i));
    out.push_back(idx);
  }
  return out;
}

Outcome gradient_soundness() {
  const std::size_t d = 8, M = 16, K = 4, rows = 6;
  const double h = 1e-4;
  double worst = 0;
  std::size_t checked = 0, skipped = 0;
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    std::mt19937_64 rng(1000 + inst);
    std::normal_distribution<double> normal(0, 1);
    auto p = init_params<double>(d, M, K, 500 + inst);
    for (auto& v : p.enc) v += 0.3 * normal(rng);
    for (auto& v : p.b_pre) v = 0.3 * normal(rng);
    std::vector<double> batch(rows * d);
    for (auto& v : batch) v = normal(rng);
    const auto g = gradients(RowsView<double>{batch, d}, p);
    const auto base = masks(batch, p);
    auto probe = [&](std::vector<double>& tensor, const std::vector<double>& grad) {
      for (std::size_t i = 0; i < tensor.size(); ++i) {
        const double keep = tensor[i];
        tensor[i] = keep + h;
        const double lp = oracle_loss(batch, p);
        const bool same_p = masks(batch, p) == base;
        tensor[i] = keep - h;
        const double lm = oracle_loss(batch, p);
        const bool same_m = masks(batch, p) == base;
        tensor[i] = keep;
        if (!same_p || !same_m) {
          ++skipped;
          continue;
        }
        const double fd = (lp - lm) / (2 * h);
        worst = std::max(worst, std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6}));
        ++checked;
      }
    };
    probe(p.enc, g.enc);
    probe(p.dec, g.dec);
    probe(p.b_pre, g.b_pre);
  }
  return {worst < 1e-4 && checked > 0, "max relative error " + fmt(worst) + " over " + std::to_string(checked) +
                                           " coordinates, " + std::to_string(skipped) + " tie coordinates skipped"};
}

Outcome planted_recovery() {
  planted::PlantedCorpusSpec spec;
  spec.seed = 1;
  spec.pretrain_samples = 200000;
  const auto corpus = planted::generate_planted_corpus(spec, 1);
  TempDir dir;
  const auto shard = dir.file("pre.shard");
  write_shard(corpus.pretrain, {spec.d, 0, corpus.pretrain.size(), Stage::kPretrain, "planted"}, shard);
  auto cfg = TrainConfig::defaults(TrainStage::kPretrain);
  cfg.dictionary_size = 64;
  cfg.k = 3;
  cfg.seed = spec.seed;
  const std::string paths[] = {shard};
  const auto [params, stats] = train_stage<float>(cfg, paths, std::nullopt);
  const auto match = planted::greedy_match(corpus.truth, params.dec);
  std::size_t good = 0;
  double lowest = 1;
  for (const auto& m : match) {
    good += m.cosine >= 0.9;
    lowest = std::min(lowest, m.cosine);
  }
  return {good >= 14, std::to_string(good) + "/16 atoms at cosine >= 0.9, lowest " + fmt(lowest)};
}

Outcome contrastive_oracle() {
  planted::PlantedCorpusSpec spec;
  spec.seed = 4;
  spec.noise_sigma = 0.05;
  const auto corpus = planted::generate_planted_corpus(spec, 1000);
  TempDir dir;
  write_shard(corpus.preference, {spec.d, 0, corpus.preference.size(), Stage::kPreference, ""}, dir.file("p.shard"));
  const auto params = init_params<float>(spec.d, 64, 4, 4);
  const auto scores = contrastive_scores(aggregate(dir.file("p.shard"), params, AggregationMode::kLastToken));

  std::vector<double> hp(params.M, 0.0), hm(params.M, 0.0);
  for (const auto& r : corpus.preference) {
    const auto z = dense_latent(r.last_token(), params);
    auto& h = r.role == Role::kChosen ? hp : hm;
    for (std::size_t i = 0; i < params.M; ++i) h[i] += z[i];
  }
  const double C = (std::accumulate(hp.begin(), hp.end(), 0.0) + std::accumulate(hm.begin(), hm.end(), 0.0)) /
                   static_cast<double>(params.M);
  double worst = 0;
  for (std::size_t i = 0; i < params.M; ++i) {
    const double denom = hp[i] + hm[i] + C;
    const double s = denom == 0 ? 0.0 : (hp[i] - hm[i]) / denom;
    worst = std::max(worst, std::abs(s - scores.s[i]));
  }
  return {worst <= 1e-6, "1000 pairs, max |s - oracle| = " + fmt(worst)};
}

RunConfig planted_run(const std::string& run_dir, std::uint64_t seed) {
  RunConfig c;
  c.run_dir = run_dir;
  c.seed = seed;
  c.sae_dictionary_size = 32;
  c.sae_k = 4;
  return c;
}

void run_verbs(const RunConfig& c, std::initializer_list<const char*> verbs) {
  std::ostringstream log;
  for (const char* v : verbs) pipeline::run_command(v, c, log);
}

Outcome planted_detection() {
  std::size_t ok = 0;
  std::string failures;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    TempDir dir;
    const auto c = planted_run(dir.file("run"), seed);
    run_verbs(c, {"synth", "train-sae", "score-features"});
    const auto truth = planted::read_ground_truth(c.resolve(pipeline::artifact::kGroundTruth));
    const auto params = load_checkpoint(c.resolve(c.checkpoint));
    const auto match = planted::greedy_match(truth, params.dec);
    const auto pos = match[truth.safety_atom_pair[0]].feature;
    const auto neg = match[truth.safety_atom_pair[1]].feature;
    const auto scores = read_scores(c.resolve(pipeline::artifact::kScores));
    const std::set<std::uint32_t> top2 = {scores.ranking[0], scores.ranking[1]};
    const bool pass = top2 == std::set<std::uint32_t>{pos, neg} && scores.s[pos] > 0 && scores.s[neg] < 0;
    if (pass) ++ok;
    else failures += " " + std::to_string(seed);
  }
  return {ok >= 9, std::to_string(ok) + "/10 seeds" + (failures.empty() ? "" : ", failed seeds:" + failures)};
}

std::vector<std::uint64_t> oracle_top(const std::vector<PairScore>& s, std::size_t k, bool top) {
  std::vector<std::pair<double, std::uint64_t>> v;
  for (const auto& p : s) v.emplace_back(p.score_safe, p.id);
  std::sort(v.begin(), v.end(), [](auto& a, auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  if (!top) std::reverse(v.begin(), v.end());
  std::vector<std::uint64_t> ids;
  for (std::size_t i = 0; i < k; ++i) ids.push_back(v[i].second);
  return ids;
}

Outcome manipulation_exactness() {
  planted::PlantedCorpusSpec spec;
  spec.seed = 6;
  spec.noise_sigma = 0.05;
  const auto corpus = planted::generate_planted_corpus(spec, 1000);
  TempDir dir;
  write_shard(corpus.preference, {spec.d, 0, corpus.preference.size(), Stage::kPreference, ""}, dir.file("p.shard"));
  write_dataset(dir.file("d.jsonl"), corpus.dataset);
  SaeParams<float> params(spec.d, 16, 4);
  params.enc = corpus.truth.atoms;
  params.dec = corpus.truth.atoms;
  params.b_pre = corpus.truth.bias;
  SafetyFeatureSet safety;
  safety.plus = {0};
  safety.minus = {1};
  const auto scores = score_pairs(dir.file("p.shard"), params, safety, AggregationMode::kLastToken);

  // Independent score_safe: per-record safety margin over token count.
  std::map<std::pair<std::uint64_t, Role>, double> margin;
  for (const auto& r : corpus.preference) {
    const auto z = dense_latent(r.last_token(), params);
    margin[{r.pair_id, r.role}] = (z[0] - z[1]) / r.token_count;
  }
  std::vector<PairScore> oracle;
  for (const auto& t : corpus.dataset)
    oracle.push_back({t.id, margin[{t.id, Role::kChosen}] - margin[{t.id, Role::kRejected}], 0, 0});

  const auto poison = plan_manipulation(scores, ManipulationKind::kPoison, 0.05);
  apply_plan_file(dir.file("d.jsonl"), dir.file("poison.jsonl"), poison);
  std::size_t flipped = 0;
  std::set<std::uint64_t> flipped_ids;
  for (const auto& t : read_dataset(dir.file("poison.jsonl")))
    if (t.flipped) {
      ++flipped;
      flipped_ids.insert(t.id);
    }
  const auto expected = oracle_top(oracle, 50, true);
  const bool poison_ok = flipped == 50 && flipped_ids == std::set<std::uint64_t>(expected.begin(), expected.end());

  const auto denoise = plan_manipulation(scores, ManipulationKind::kDenoise, 0.10);
  apply_plan_file(dir.file("d.jsonl"), dir.file("denoise.jsonl"), denoise);
  std::set<std::uint64_t> survivors;
  for (const auto& t : read_dataset(dir.file("denoise.jsonl"))) survivors.insert(t.id);
  const auto bottom = oracle_top(oracle, 100, false);
  bool denoise_ok = survivors.size() == 900;
  for (auto id : bottom) denoise_ok = denoise_ok && !survivors.count(id);

  apply_plan_file(dir.file("poison.jsonl"), dir.file("twice.jsonl"), poison);
  const bool involution = testing::slurp(dir.file("twice.jsonl")) == testing::slurp(dir.file("d.jsonl"));
  return {poison_ok && denoise_ok && involution,
          std::to_string(flipped) + " flipped (oracle top-50 " + (poison_ok ? "equal" : "differs") + "), " +
              std::to_string(1000 - survivors.size()) + " removed (bottom-100 " + (denoise_ok ? "equal" : "differs") +
              "), double flip " + (involution ? "byte-exact" : "differs")};
}

template <typename Fn>
bool faults_as(Fn&& fn, FormatFault expected) {
  try {
    fn();
  } catch (const FormatError& e) {
    return e.fault() == expected;
  } catch (...) {
    return false;
  }
  return false;
}

template <typename Fn>
bool missing(Fn&& fn) {
  try {
    fn();
  } catch (const MissingArtifactError&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome format_round_trips() {
  TempDir dir;
  std::mt19937_64 rng(12);
  std::vector<std::string> bad;
  // Shards with arbitrary finite bit patterns.
  for (int trial = 0; trial < 20; ++trial) {
    const std::uint32_t d = 1 + rng() % 16;
    std::vector<SequenceRecord> recs;
    for (std::size_t i = 0, n = rng() % 20; i < n; ++i) {
      SequenceRecord r;
      r.pair_id = rng();
      r.role = i % 2 ? Role::kRejected : Role::kChosen;
      r.token_count = 1 + rng() % 6;
      r.has_all_tokens = rng() % 2;
      r.values.resize(r.rows() * d);
      for (auto& v : r.values) {
        const auto bits = static_cast<std::uint32_t>(rng());
        std::memcpy(&v, &bits, 4);
        if (!std::isfinite(v)) v = -0.0f;
      }
      recs.push_back(std::move(r));
    }
    const auto path = dir.file("r" + std::to_string(trial) + ".shard");
    write_shard(recs, {d, 0, recs.size(), Stage::kPreference, ""}, path);
    const auto back = read_all_records(path);
    bool same = back.size() == recs.size();
    for (std::size_t i = 0; same && i < recs.size(); ++i)
      same = back[i].pair_id == recs[i].pair_id && back[i].role == recs[i].role &&
             back[i].token_count == recs[i].token_count && back[i].values.size() == recs[i].values.size() &&
             std::memcmp(back[i].values.data(), recs[i].values.data(), recs[i].values.size() * 4) == 0;
    if (!same) bad.push_back("shard round trip");
  }
  // Checkpoints: bytes written, read and rewritten are identical.
  auto params = init_params<float>(8, 24, 4, 3);
  params.b_pre[0] = -0.0f;
  params.enc[5] = 1e-40f;
  save_checkpoint(params, dir.file("a.ckpt"));
  save_checkpoint(load_checkpoint(dir.file("a.ckpt")), dir.file("b.ckpt"));
  if (testing::slurp(dir.file("a.ckpt")) != testing::slurp(dir.file("b.ckpt"))) bad.push_back("checkpoint round trip");

  // Corruption fixtures.
  std::vector<SequenceRecord> recs(3);
  for (std::size_t i = 0; i < 3; ++i) recs[i] = {i, Role::kGeneric, 1, false, {1, 2, 3, 4}};
  write_shard(recs, {4, 0, 3, Stage::kPretrain, ""}, dir.file("good.shard"));
  const auto shard_bytes = testing::slurp(dir.file("good.shard"));
  const auto ckpt_bytes = testing::slurp(dir.file("a.ckpt"));
  auto read_shard = [&](const std::string& bytes) {
    testing::dump(dir.file("bad.shard"), bytes);
    fs::copy_file(manifest_path(dir.file("good.shard")), manifest_path(dir.file("bad.shard")),
                  fs::copy_options::overwrite_existing);
    return [&] { read_all_records(dir.file("bad.shard")); };
  };
  auto read_ckpt = [&](const std::string& bytes) {
    testing::dump(dir.file("bad.ckpt"), bytes);
    return [&] { load_checkpoint(dir.file("bad.ckpt")); };
  };
  auto with = [](std::string bytes, std::size_t at, char c) {
    bytes[at] = c;
    return bytes;
  };
  const std::vector<std::pair<std::string, bool>> cases = {
      {"shard bad magic", faults_as(read_shard(with(shard_bytes, 0, 'Z')), FormatFault::kBadMagic)},
      {"shard version", faults_as(read_shard(with(shard_bytes, 4, 7)), FormatFault::kUnsupportedVersion)},
      {"shard truncated", faults_as(read_shard(shard_bytes.substr(0, shard_bytes.size() - 5)), FormatFault::kTruncated)},
      {"shard trailing bytes", faults_as(read_shard(shard_bytes + "xx"), FormatFault::kCorrupt)},
      {"shard missing", missing([&] { read_all_records(dir.file("none.shard")); })},
      {"checkpoint bad magic", faults_as(read_ckpt(with(ckpt_bytes, 0, 'Z')), FormatFault::kBadMagic)},
      {"checkpoint version", faults_as(read_ckpt(with(ckpt_bytes, 4, 7)), FormatFault::kUnsupportedVersion)},
      {"checkpoint truncated", faults_as(read_ckpt(ckpt_bytes.substr(0, ckpt_bytes.size() - 3)), FormatFault::kTruncated)},
      {"checkpoint trailing bytes", faults_as(read_ckpt(ckpt_bytes + "x"), FormatFault::kCorrupt)},
      {"checkpoint missing", missing([&] { load_checkpoint(dir.file("none.ckpt")); })},
  };
  for (const auto& [name, ok] : cases)
    if (!ok) bad.push_back(name);
  std::string detail = "20 shard and 1 checkpoint round trips, " + std::to_string(cases.size()) + " corruption classes";
  for (const auto& b : bad) detail += "; FAILED " + b;
  return {bad.empty(), detail};
}

std::map<std::string, std::string> snapshot(const std::string& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = testing::slurp(e.path().string());
  return files;
}

Outcome determinism() {
  TempDir dir;
  std::map<std::string, std::string> runs[2];
  for (int i = 0; i < 2; ++i) {
    const auto c = planted_run(dir.file("run" + std::to_string(i)), 7);
    run_verbs(c, {"synth", "train-sae", "score-features", "interpret", "score-pairs", "poison", "denoise", "report"});
    runs[i] = snapshot(c.run_dir);
  }
  std::vector<std::string> differing;
  for (const auto& [name, bytes] : runs[0]) {
    const auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != bytes) differing.push_back(name);
  }
  if (runs[0].size() != runs[1].size()) differing.push_back("file set");
  std::string detail = std::to_string(runs[0].size()) + " artifacts compared";
  for (const auto& d : differing) detail += "; differs: " + d;
  return {differing.empty() && runs[0].size() > 1, detail};
}

Outcome score_structure() {
  ContrastiveScores scores;
  std::string source;
  TempDir dir;
  const char* shard = std::getenv("SAFER_REAL_SHARD");
  const char* checkpoint = std::getenv("SAFER_REAL_CHECKPOINT");
  if (shard && *shard) {
    if (!checkpoint || !*checkpoint)
      return {false, "SAFER_REAL_SHARD needs SAFER_REAL_CHECKPOINT with a matching SAE checkpoint"};
    const auto params = load_checkpoint(checkpoint);
    scores = contrastive_scores(aggregate(shard, params, AggregationMode::kLastToken));
    write_scores(dir.file("scores.jsonl"), scores);
    source = std::string("exported activations ") + shard;
  } else {
    const auto c = planted_run(dir.file("run"), 3);
    run_verbs(c, {"synth", "train-sae", "score-features"});
    fs::copy_file(c.resolve(pipeline::artifact::kScores), dir.file("scores.jsonl"));
    source = "synthetic shards (set SAFER_REAL_SHARD and SAFER_REAL_CHECKPOINT for exported activations)";
  }
  // Check the written export, not the in-memory scores.
  const auto back = read_scores(dir.file("scores.jsonl"));
  bool bounded = true, ordered = true;
  for (double s : back.s) bounded = bounded && s > -1.0 && s < 1.0;
  for (std::size_t r = 1; r < back.ranking.size(); ++r) {
    const double prev = std::abs(back.s[back.ranking[r - 1]]), cur = std::abs(back.s[back.ranking[r]]);
    // Equal |s| is ordered by ascending feature index, which keeps the order strict.
    ordered = ordered && (prev > cur || (prev == cur && back.ranking[r - 1] < back.ranking[r]));
  }
  const double top = back.ranking.empty() ? 0.0 : back.s[back.ranking[0]];
  return {bounded && ordered && !back.ranking.empty(),
          source + ": " + std::to_string(back.s.size()) + " features, s in (-1,1) " + (bounded ? "yes" : "NO") +
              ", strict |s| order " + (ordered ? "yes" : "NO") + ", rank-1 s = " + fmt(top)};
}

struct Criterion {
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace safer::acceptance

int main() {
  using namespace safer::acceptance;
  const std::vector<Criterion> criteria = {
      {"topk_contract", 10, topk_contract},
      {"gradient_soundness", 30, gradient_soundness},
      {"planted_dictionary_recovery", 600, planted_recovery},
      {"contrastive_oracle_equivalence", 0, contrastive_oracle},
      {"end_to_end_planted_detection", 0, planted_detection},
      {"manipulation_exactness", 0, manipulation_exactness},
      {"format_round_trips", 0, format_round_trips},
      {"determinism", 0, determinism},
      {"score_structure_sanity", 0, score_structure},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_seconds > 0 && secs >= c.budget_seconds) {
      out.pass = false;
      out.detail += "; over the " + fmt(c.budget_seconds) + " s budget";
    }
    failed += !out.pass;
    std::cout << (out.pass ? "PASS " : "FAIL ") << c.name << ": " << out.detail << " [" << fmt(secs, 3) << " s]"
              << std::endl;
  }
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << criteria.size() - failed << "/" << criteria.size()
            << std::endl;
  return failed ? 1 : 0;
}
