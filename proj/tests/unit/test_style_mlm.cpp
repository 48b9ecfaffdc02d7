#include "smlm/checkpoint.hpp"
#include "smlm/error.hpp"
#include "smlm/style_mlm.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <filesystem>

namespace {

using namespace smlm;
using namespace smlm::mlm;

SmlmConfig tiny_config() {
  SmlmConfig c;
  c.layers = 1;
  c.heads = 2;
  c.embedding_dim = 8;
  c.ff_dim = 16;
  c.max_length = 12;
  c.bootstrap_epochs = 60;
  c.dropout = 0.0;
  c.batch_size = 4;
  c.learning_rate = 1e-2;
  c.finetune_batch_size = 4;
  return c;
}

class TinySmlm : public ::testing::Test {
 protected:
  TinySmlm() : vocab_(Vocabulary::from_ordinary_tokens(2, Tokens{"the", "food", "was", "good", "bad", "tea"})) {
    const char* words[][4] = {{"the", "food", "was", "good"}, {"the", "tea", "was", "good"},
                              {"the", "food", "was", "bad"},  {"the", "tea", "was", "bad"}};
    for (int i = 0; i < 4; ++i) {
      LabeledExample ex{Tokens(words[i], words[i] + 4), i < 2 ? 1 : 0, std::nullopt};
      pairs_.push_back(masking::apply_mask(ex, masking::Mask{0, 0, 0, 1}));
    }
  }
  Vocabulary vocab_;
  std::vector<masking::StyleMaskedSentence> pairs_;
};

TEST(SmlmConfigTest, ValidationAndJson) {
  auto c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.clip_threshold = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.head_learning_rate = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);

  c = tiny_config();
  const auto back = SmlmConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(SmlmConfig{}.clip_threshold, 1e-3);
  EXPECT_EQ(SmlmConfig{}.bootstrap_epochs, 15);
}

TEST_F(TinySmlm, ForwardIsRowStochastic) {
  const auto model = build_smlm(tiny_config(), vocab_);
  const auto ids = encode(pairs_[0].tokens, vocab_);
  const Matrix probs = model.forward(ids, {1, 0});
  ASSERT_EQ(probs.rows(), 4);
  ASSERT_EQ(probs.cols(), vocab_.size());
  for (Eigen::Index r = 0; r < probs.rows(); ++r) EXPECT_NEAR(probs.row(r).sum(), 1.0, 1e-12);
  EXPECT_THROW(model.forward(ids, {2, 0}), std::out_of_range);
  const std::vector<int> too_long(11, vocab_.id("the"));
  EXPECT_THROW(model.forward(too_long, {0, 0}), std::length_error);
}

TEST_F(TinySmlm, DecodeNeverEmitsControlTokens) {
  const auto model = build_smlm(tiny_config(), vocab_);
  const Matrix probs = model.forward(encode(pairs_[0].tokens, vocab_), {1, 1});
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const int id = model.decode_position(probs, r);
    EXPECT_TRUE(id == Vocabulary::kUnk || !vocab_.is_reserved(id)) << id;
  }
}

TEST_F(TinySmlm, HardCopyThroughKeepsUnmaskedTokens) {
  const auto model = build_smlm(tiny_config(), vocab_);
  for (const auto& p : pairs_) {
    const auto out = decode_transfer(model, p, 1 - p.source_style, vocab_);
    ASSERT_EQ(out.size(), p.original.tokens.size());
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out[i], p.original.tokens[i]);
  }
}

TEST_F(TinySmlm, BootstrapLearnsSameStyleReconstruction) {
  auto model = build_smlm(tiny_config(), vocab_);
  const auto log = bootstrap_train(model, pairs_, vocab_);
  ASSERT_EQ(log.size(), 60u);
  EXPECT_LT(log.back().loss, log.front().loss);
  const auto stats = reconstruction_accuracy(model, pairs_, vocab_);
  EXPECT_EQ(stats.masked_positions, 4u);
  EXPECT_EQ(stats.unmasked_positions, 12u);
  EXPECT_DOUBLE_EQ(stats.masked_accuracy, 1.0);
}

TEST_F(TinySmlm, FinetuneClipsGradientsAndStaysFinite) {
  auto model = build_smlm(tiny_config(), vocab_);
  bootstrap_train(model, pairs_, vocab_);
  StyleClassifierHead head(8, 2, 1);
  const auto log = finetune(model, head, pairs_, vocab_);
  ASSERT_EQ(log.size(), 1u);
  EXPECT_LE(log.back().max_clipped_grad_norm, 1e-3 * (1 + 1e-9));
  EXPECT_TRUE(model.params().all_finite());
  EXPECT_TRUE(head.params().all_finite());
}

TEST_F(TinySmlm, CheckpointRoundTrip) {
  auto model = build_smlm(tiny_config(), vocab_);
  const auto log = bootstrap_train(model, pairs_, vocab_);
  StyleClassifierHead head(8, 2, 3);
  const auto dir = std::filesystem::temp_directory_path() / "smlm_ckpt_roundtrip";
  std::filesystem::remove_all(dir);
  save_smlm(dir, model, vocab_, log, &head);
  EXPECT_TRUE(std::filesystem::exists(dir / "train_log.jsonl"));

  const auto loaded = load_smlm(dir, vocab_);
  const auto ids = encode(pairs_[2].tokens, vocab_);
  EXPECT_EQ(loaded.forward(ids, {0, 1}), model.forward(ids, {0, 1}));
  const auto loaded_head = load_head(dir, loaded);
  const Var probe = ad::constant(Matrix::Ones(3, 8));
  EXPECT_EQ(loaded_head.logits(probe).value(), head.logits(probe).value());
}

TEST(Checkpoint, RejectsShapeMismatch) {
  nn::Rng rng(1);
  nn::ParamList a;
  nn::Linear la(a, "x", 3, 2, rng);
  nn::ParamList b;
  nn::Linear lb(b, "x", 3, 4, rng);
  const auto path = std::filesystem::temp_directory_path() / "smlm_ckpt_mismatch.bin";
  save_checkpoint(path, a, nlohmann::json{{"kind", "test"}});
  EXPECT_EQ(read_checkpoint_metadata(path).at("kind"), "test");
  EXPECT_THROW(load_checkpoint(path, b), Error);
}

}  // namespace
