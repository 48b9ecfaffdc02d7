#include "smlm/error.hpp"
#include "smlm/masking.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

namespace {

using namespace smlm;
using masking::Mask;

struct MaskCase {
  std::vector<double> scores;
  double lambda;
  std::vector<int> mask;
};
#include "data/masking_cases.inc"

Mask to_mask(const std::vector<int>& bits) { return Mask(bits.begin(), bits.end()); }

TEST(AttentionSurplus, MatchesOracleSuite) {
  int index = 0;
  for (const auto& c : kMaskCases) {
    EXPECT_EQ(masking::attention_surplus_mask(c.scores, c.lambda), to_mask(c.mask)) << "case " << index;
    ++index;
  }
  EXPECT_EQ(index, 50);
}

TEST(AttentionSurplus, UniformScoresAtZeroLambdaMaskEverything) {
  for (std::size_t n = 1; n <= 40; ++n) {
    const std::vector<double> uniform(n, 1.0 / static_cast<double>(n));
    const auto mask = masking::attention_surplus_mask(uniform, 0.0);
    EXPECT_EQ(mask, Mask(n, 1)) << n;
  }
}

TEST(AttentionSurplus, BaselineFormula) {
  EXPECT_DOUBLE_EQ(masking::compute_baseline(4, 0.0), 0.25);
  EXPECT_DOUBLE_EQ(masking::compute_baseline(4, 0.15), 0.2875);
  EXPECT_DOUBLE_EQ(masking::compute_baseline(10, 0.5), 0.15);
  EXPECT_THROW(masking::compute_baseline(0, 0.15), std::invalid_argument);
}

TEST(AttentionSurplus, WorkedExamples) {
  EXPECT_EQ(masking::attention_surplus_mask(std::vector<double>{0.4, 0.1, 0.1, 0.4}, 0.15), (Mask{1, 0, 0, 1}));
  EXPECT_EQ(masking::attention_surplus_mask(std::vector<double>{0.7, 0.1, 0.1, 0.1}, 1.0), (Mask{1, 0, 0, 0}));
}

TEST(MaskPolicy, ValidatesLambdaRange) {
  EXPECT_NO_THROW((masking::MaskPolicyConfig{0.0}.validate()));
  EXPECT_NO_THROW((masking::MaskPolicyConfig{1.0}.validate()));
  EXPECT_THROW((masking::MaskPolicyConfig{-0.1}.validate()), ConfigError);
  EXPECT_THROW((masking::MaskPolicyConfig{1.5}.validate()), ConfigError);
}

TEST(AttentionSurplus, BatchAgreesWithPerSentence) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> len(1, 25);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  masking::AttributionBatch batch;
  std::vector<std::vector<double>> sentences;
  for (int s = 0; s < 300; ++s) {
    std::vector<double> a(static_cast<std::size_t>(len(rng)));
    double total = 0.0;
    for (auto& x : a) total += (x = u(rng));
    for (auto& x : a) x /= total;
    batch.append(a);
    sentences.push_back(a);
  }
  for (double lambda : {0.0, 0.15, 0.5, 1.0}) {
    const auto flat = masking::attention_surplus_mask_batch(batch, lambda);
    ASSERT_EQ(flat.size(), batch.total_tokens());
    for (std::size_t s = 0; s < sentences.size(); ++s) {
      const auto expected = masking::attention_surplus_mask(sentences[s], lambda);
      const Mask got(flat.begin() + static_cast<std::ptrdiff_t>(batch.offsets[s]),
                     flat.begin() + static_cast<std::ptrdiff_t>(batch.offsets[s + 1]));
      EXPECT_EQ(got, expected) << "sentence " << s << " lambda " << lambda;
    }
  }
}

TEST(AttentionSurplus, NestedAcrossGrid) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double grid[] = {0.0, 0.15, 0.3, 0.5, 1.0};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(static_cast<std::size_t>(1 + trial % 20));
    for (auto& x : a) x = u(rng);
    Mask previous;
    for (double lambda : grid) {
      const auto mask = masking::attention_surplus_mask(a, lambda);
      for (std::size_t i = 0; i < previous.size(); ++i) EXPECT_LE(mask[i], previous[i]);
      previous = mask;
    }
  }
}

TEST(ApplyMask, ReplacesMarkedTokens) {
  const LabeledExample ex{{"the", "food", "was", "awful"}, 0, std::nullopt};
  const Mask mask{0, 0, 0, 1};
  const auto masked = masking::apply_mask(ex, mask);
  EXPECT_EQ(masked.tokens, (Tokens{"the", "food", "was", "<mask>"}));
  EXPECT_EQ(masked.mask_positions, (std::vector<std::size_t>{3}));
  EXPECT_EQ(masked.mask(), mask);
  EXPECT_EQ(masked.source_style, 0);
  EXPECT_EQ(masked.original.tokens, ex.tokens);
  const Mask wrong_length{1, 0};
  EXPECT_THROW(masking::apply_mask(ex, wrong_length), std::invalid_argument);
}

TEST(MaskExamples, UsesAttributorScores) {
  const std::vector<LabeledExample> examples{{{"a", "b", "c"}, 0, std::nullopt}, {{"d", "e"}, 1, std::nullopt}};
  const Tokens words{"a", "b", "c", "d", "e"};
  const auto vocab = Vocabulary::from_ordinary_tokens(2, words);
  const masking::Attributor attributor = [](std::span<const int> ids) {
    attribution::AttributionVector v;
    v.scores.assign(ids.size(), 0.0);
    v.scores.back() = 1.0;
    return v;
  };
  const auto masked = masking::mask_examples(examples, vocab, attributor, 0.15);
  ASSERT_EQ(masked.size(), 2u);
  EXPECT_EQ(masked[0].tokens, (Tokens{"a", "b", "<mask>"}));
  EXPECT_EQ(masked[1].tokens, (Tokens{"d", "<mask>"}));

  const auto path = std::filesystem::temp_directory_path() / "smlm_masked_roundtrip.tsv";
  masking::save_masked(masked, path);
  const auto loaded = masking::load_masked(path, examples);
  ASSERT_EQ(loaded.size(), masked.size());
  for (std::size_t i = 0; i < masked.size(); ++i) {
    EXPECT_EQ(loaded[i].tokens, masked[i].tokens);
    EXPECT_EQ(loaded[i].mask_positions, masked[i].mask_positions);
    EXPECT_EQ(loaded[i].original.tokens, examples[i].tokens);
  }
}

}  // namespace
