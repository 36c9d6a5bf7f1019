#include <gtest/gtest.h>

#include <cmath>

#include "safer/planted.hpp"
#include "test_util.hpp"

namespace safer::planted {
namespace {

PlantedCorpusSpec base_spec() {
  PlantedCorpusSpec s;
  s.d = 32;
  s.true_atoms = 16;
  s.active_per_sample = 3;
  s.noise_sigma = 0.05;
  s.margin = 2.0;
  s.safety_atom_pair = {3, 7};
  s.seed = 11;
  s.pretrain_samples = 200;
  return s;
}

TEST(Planted, AtomsHaveUnitNorm) {
  auto c = generate_planted_corpus(base_spec(), 2);
  for (std::size_t i = 0; i < c.truth.true_atoms; ++i)
    EXPECT_NEAR(std::sqrt(dot(c.truth.atom(i), c.truth.atom(i))), 1.0, 1e-6);
}

TEST(Planted, OrthonormalDictionary) {
  auto s = base_spec();
  s.orthonormal = true;
  auto c = generate_planted_corpus(s, 1);
  for (std::size_t i = 0; i < s.true_atoms; ++i)
    for (std::size_t j = 0; j < s.true_atoms; ++j)
      EXPECT_NEAR(dot(c.truth.atom(i), c.truth.atom(j)), i == j ? 1.0 : 0.0, 1e-6);
}

TEST(Planted, SameSeedIsBitIdentical) {
  testing::TempDir dir;
  auto a = generate_planted_corpus(base_spec(), 20);
  auto b = generate_planted_corpus(base_spec(), 20);
  write_shard(a.preference, {32, 0, a.preference.size(), Stage::kPreference, ""}, dir.file("a"));
  write_shard(b.preference, {32, 0, b.preference.size(), Stage::kPreference, ""}, dir.file("b"));
  EXPECT_EQ(testing::slurp(dir.file("a")), testing::slurp(dir.file("b")));
  EXPECT_EQ(a.pretrain, b.pretrain);
  EXPECT_EQ(a.dataset, b.dataset);
  auto s = base_spec();
  s.seed = 12;
  EXPECT_NE(generate_planted_corpus(s, 20).preference, a.preference);
}

TEST(Planted, RecordLayoutMatchesDataset) {
  auto c = generate_planted_corpus(base_spec(), 5);
  ASSERT_EQ(c.preference.size(), 10u);
  ASSERT_EQ(c.dataset.size(), 5u);
  for (std::size_t p = 0; p < 5; ++p) {
    const auto& ch = c.preference[2 * p];
    const auto& rj = c.preference[2 * p + 1];
    EXPECT_EQ(ch.role, Role::kChosen);
    EXPECT_EQ(rj.role, Role::kRejected);
    EXPECT_EQ(ch.pair_id, p);
    EXPECT_EQ(ch.token_count, c.dataset[p].tokens_chosen);
    EXPECT_EQ(rj.token_count, c.dataset[p].tokens_rejected);
    EXPECT_EQ(c.dataset[p].tokens_chosen,
              text::split_words(c.dataset[p].prompt).size() + c.dataset[p].response_tokens_chosen);
  }
  for (const auto& r : c.pretrain) EXPECT_EQ(r.role, Role::kGeneric);
}

// Recompute every stored projection from the ground-truth atoms.
TEST(Planted, StoredProjectionsMatchIndependentRecompute) {
  testing::TempDir dir;
  auto s = base_spec();
  auto c = generate_planted_corpus(s, 500);
  write_ground_truth(dir.file("gt.json"), c.truth);
  const auto truth = read_ground_truth(dir.file("gt.json"));
  const auto pos = truth.atom(s.safety_atom_pair[0]);
  const auto neg = truth.atom(s.safety_atom_pair[1]);
  ASSERT_EQ(truth.pairs.size(), 500u);
  for (std::size_t p = 0; p < 500; ++p) {
    const auto ch = c.preference[2 * p].last_token();
    const auto rj = c.preference[2 * p + 1].last_token();
    double cp = 0, cn = 0, rp = 0, rn = 0;
    for (std::size_t k = 0; k < s.d; ++k) {
      cp += double(ch[k]) * pos[k];
      cn += double(ch[k]) * neg[k];
      rp += double(rj[k]) * pos[k];
      rn += double(rj[k]) * neg[k];
    }
    EXPECT_NEAR(truth.pairs[p].chosen_on_pos, cp, 1e-6);
    EXPECT_NEAR(truth.pairs[p].chosen_on_neg, cn, 1e-6);
    EXPECT_NEAR(truth.pairs[p].rejected_on_pos, rp, 1e-6);
    EXPECT_NEAR(truth.pairs[p].rejected_on_neg, rn, 1e-6);
  }
}

TEST(Planted, MarginShiftsChosenTowardPositiveAtom) {
  auto c = generate_planted_corpus(base_spec(), 400);
  double diff = 0;
  for (const auto& p : c.truth.pairs) diff += p.chosen_on_pos - p.rejected_on_pos;
  EXPECT_GT(diff / 400.0, 1.5);  // planted margins average 2.0
}

// With no plant the two sides are exchangeable: the mean projection gap on
// each safety atom stays within 3 standard errors.
TEST(Planted, ZeroMarginSidesAreExchangeable) {
  auto s = base_spec();
  s.margin = 0.0;
  s.noise_sigma = 0.0;
  const std::size_t n = 2000;
  auto c = generate_planted_corpus(s, n);
  auto check = [&](auto chosen_proj, auto rejected_proj) {
    double mc = 0, mr = 0;
    for (const auto& p : c.truth.pairs) {
      mc += chosen_proj(p);
      mr += rejected_proj(p);
    }
    mc /= n;
    mr /= n;
    double var = 0;
    for (const auto& p : c.truth.pairs) {
      var += std::pow(chosen_proj(p) - mc, 2) + std::pow(rejected_proj(p) - mr, 2);
    }
    const double sigma = std::sqrt(var / (2.0 * n - 1));
    EXPECT_LT(std::abs(mc - mr), 3.0 * sigma / std::sqrt(double(n)));
  };
  check([](const PairTruth& p) { return p.chosen_on_pos; }, [](const PairTruth& p) { return p.rejected_on_pos; });
  check([](const PairTruth& p) { return p.chosen_on_neg; }, [](const PairTruth& p) { return p.rejected_on_neg; });
}

TEST(Planted, AllTokenPayloadsPlantOnlyFinalToken) {
  auto s = base_spec();
  s.all_tokens = true;
  auto c = generate_planted_corpus(s, 3);
  for (const auto& r : c.preference) {
    EXPECT_TRUE(r.has_all_tokens);
    EXPECT_EQ(r.rows(), r.token_count);
    EXPECT_EQ(r.values.size(), r.token_count * s.d);
  }
  EXPECT_NEAR(c.truth.pairs[0].chosen_on_pos, dot(c.preference[0].last_token(), c.truth.atom(3)), 1e-9);
}

TEST(Planted, InvalidSpecsAreRejected) {
  auto s = base_spec();
  s.active_per_sample = 17;
  EXPECT_THROW(generate_planted_corpus(s, 1), ConfigError);
  s = base_spec();
  s.safety_atom_pair = {2, 2};
  EXPECT_THROW(generate_planted_corpus(s, 1), ConfigError);
  s = base_spec();
  s.noise_sigma = -1;
  EXPECT_THROW(generate_planted_corpus(s, 1), ConfigError);
  s = base_spec();
  s.orthonormal = true;
  s.true_atoms = 40;
  EXPECT_THROW(generate_planted_corpus(s, 1), ConfigError);
  EXPECT_THROW(generate_planted_corpus(base_spec(), 0), ConfigError);
}

TEST(GreedyMatch, IdentityPermutationAndConflicts) {
  GroundTruth t;
  t.d = 2;
  t.true_atoms = 2;
  t.atoms = {1, 0, 0, 1};
  // Feature 0 is closest to atom 1, feature 2 to atom 0; feature 1 is a
  // scaled copy of atom 1 that loses the tie on index order.
  const std::vector<float> cols = {0, 1, 0, 3, 1, 0.01f};
  const auto m = greedy_match(t, cols);
  EXPECT_EQ(m[1].feature, 0u);
  EXPECT_NEAR(m[1].cosine, 1.0, 1e-12);
  EXPECT_EQ(m[0].feature, 2u);
  EXPECT_GT(m[0].cosine, 0.99);
  // One-to-one: when two atoms want the same feature, the weaker takes another.
  const std::vector<float> shared = {0.8f, 0.6f, -1, 0};
  const auto n = greedy_match(t, shared);
  EXPECT_EQ(n[0].feature, 0u);
  EXPECT_EQ(n[1].feature, 1u);
  EXPECT_NEAR(n[1].cosine, 0.0, 1e-12);
  EXPECT_THROW(greedy_match(t, std::vector<float>{1, 0}), DimensionError);
  EXPECT_THROW(greedy_match(t, std::vector<float>{1, 0, 1}), DimensionError);
}

}  // namespace
}  // namespace safer::planted
