#include <gtest/gtest.h>

#include "safer/config.hpp"
#include "test_util.hpp"

namespace safer {
namespace {

TEST(RunConfig, ReferenceDefaults) {
  const RunConfig c;
  EXPECT_EQ(c.sae_k, 64u);
  EXPECT_EQ(c.sae_dictionary_size, 16384u);
  EXPECT_EQ(c.pretrain_lr, 5e-4);
  EXPECT_EQ(c.pretrain_batch, 16u);
  EXPECT_EQ(c.finetune_lr, 3e-4);
  EXPECT_EQ(c.finetune_batch, 8u);
  EXPECT_EQ(c.judge_top_n, 100u);
  EXPECT_EQ(c.mode, AggregationMode::kLastToken);
  EXPECT_EQ(c.token_basis, TokenBasis::kConcatenated);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, SetParsesEveryKind) {
  RunConfig c;
  c.set("seed", "42");
  c.set("rate", "0.025");
  c.set("finetune", "false");
  c.set("mode", "all_tokens");
  c.set("kind", "denoise");
  c.set("token_basis", "response");
  c.set("dataset", "/abs/data.jsonl");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.rate, 0.025);
  EXPECT_FALSE(c.finetune);
  EXPECT_EQ(c.mode, AggregationMode::kAllTokens);
  EXPECT_EQ(c.kind, ManipulationKind::kDenoise);
  EXPECT_EQ(c.token_basis, TokenBasis::kResponse);
  EXPECT_EQ(c.resolve(c.dataset), "/abs/data.jsonl");
  c.run_dir = "runs/a";
  EXPECT_EQ(c.resolve("x.bin"), "runs/a/x.bin");
}

TEST(RunConfig, BadValuesAreConfigErrors) {
  RunConfig c;
  EXPECT_THROW(c.set("no_such_key", "1"), ConfigError);
  EXPECT_THROW(c.set("seed", "-1"), ConfigError);
  EXPECT_THROW(c.set("seed", "12x"), ConfigError);
  EXPECT_THROW(c.set("rate", "fast"), ConfigError);
  EXPECT_THROW(c.set("finetune", "maybe"), ConfigError);
  EXPECT_THROW(c.set("mode", "middle_token"), ConfigError);
  EXPECT_THROW(c.set("token_basis", "words"), ConfigError);
}

TEST(RunConfig, Validation) {
  auto expect_invalid = [](auto mutate) {
    RunConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  expect_invalid([](RunConfig& c) { c.rate = 0; });
  expect_invalid([](RunConfig& c) { c.rate = 1; });
  expect_invalid([](RunConfig& c) { c.sae_k = 20000; });
  expect_invalid([](RunConfig& c) { c.judge = "oracle"; });
  expect_invalid([](RunConfig& c) { c.selector = "best"; });
  expect_invalid([](RunConfig& c) { c.pretrain_batch = 0; });
  expect_invalid([](RunConfig& c) { c.run_dir = ""; });
}

TEST(RunConfig, LoadFileWithCommentsAndMalformedLines) {
  testing::TempDir dir;
  testing::dump(dir.file("a.conf"), "# run\nseed = 7\n\n  sae_k=8\nsae_dictionary_size=32\n");
  const auto c = RunConfig::load(dir.file("a.conf"));
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.sae_k, 8u);
  testing::dump(dir.file("b.conf"), "seed 7\n");
  EXPECT_THROW(RunConfig::load(dir.file("b.conf")), ConfigError);
  EXPECT_THROW(RunConfig::load(dir.file("missing.conf")), ConfigError);
}

TEST(RunConfig, HashIgnoresRunDirAndSecret) {
  RunConfig a, b;
  b.run_dir = "elsewhere";
  b.judge_key = "sk-secret";
  EXPECT_EQ(a.hash(), b.hash());
  for (const auto& [k, v] : b.recorded()) {
    EXPECT_NE(k, "judge_key");
    EXPECT_NE(v, "sk-secret");
    EXPECT_NE(k, "run_dir");
  }
  b.seed = 1;
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 16u);
}

// Property: recorded() round-trips through set() for every key.
TEST(RunConfig, RecordedValuesRoundTrip) {
  RunConfig a;
  a.seed = 99;
  a.rate = 0.1;
  a.synth_noise_sigma = 0.125;
  a.mode = AggregationMode::kAllTokens;
  RunConfig b;
  b.apply(a.recorded());
  EXPECT_EQ(a.recorded(), b.recorded());
  EXPECT_EQ(a.hash(), b.hash());
}

TEST(RunConfig, StageConfigs) {
  RunConfig c;
  c.sae_dictionary_size = 128;
  c.sae_k = 4;
  c.seed = 3;
  c.mode = AggregationMode::kAllTokens;
  const auto pre = c.pretrain_config();
  EXPECT_EQ(pre.stage, TrainStage::kPretrain);
  EXPECT_EQ(pre.dictionary_size, 128u);
  EXPECT_EQ(pre.k, 4u);
  EXPECT_EQ(pre.aggregation, AggregationMode::kAllTokens);
  const auto ft = c.finetune_config();
  EXPECT_EQ(ft.stage, TrainStage::kFinetune);
  EXPECT_EQ(ft.learning_rate, 3e-4);
  EXPECT_EQ(ft.batch_size, 8u);
  EXPECT_EQ(ft.aggregation, AggregationMode::kAllTokens);
}

}  // namespace
}  // namespace safer
