#pragma once

// The style-masked language model: a bidirectional transformer encoder that
// reconstructs a style-masked sentence conditioned on appended source and
// destination control codes, plus the style head used for fine-tuning.

#include "smlm/attribution.hpp"
#include "smlm/corpus.hpp"
#include "smlm/masking.hpp"
#include "smlm/nn.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace smlm::mlm {

using ad::Matrix;
using ad::Var;

struct SmlmConfig {
  int layers = 2;
  int heads = 8;
  int embedding_dim = 512;
  int ff_dim = 2048;
  double dropout = 0.1;
  int max_length = 128;  // including the two control codes
  int bootstrap_epochs = 15;
  int finetune_epochs = 1;
  double lambda_sta = 1.0;
  double clip_threshold = 1e-3;
  double learning_rate = 1e-3;
  double finetune_learning_rate = 1e-3;
  double head_learning_rate = 1e-3;
  int batch_size = 32;
  int finetune_batch_size = 32;
  // Weight of the head's adversarial term relative to its L_cls term.
  double adversarial_ratio = 1.0;
  bool masked_only_loss = false;
  bool hard_copy_through = true;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static SmlmConfig from_json(const nlohmann::json& doc);
};

struct ControlCodes {
  int src = 0;
  int dst = 0;
};

class SmlmModel {
 public:
  SmlmModel(const SmlmConfig& config, const Vocabulary& vocab);
  SmlmModel(SmlmModel&&) = default;
  SmlmModel& operator=(SmlmModel&&) = default;
  SmlmModel(const SmlmModel&) = delete;
  SmlmModel& operator=(const SmlmModel&) = delete;

  // Logits for the n token positions of `masked_ids` (n x V); the input
  // sequence is masked_ids ++ [<src_s>] ++ [<dst_t>].
  Var logits(std::span<const int> masked_ids, ControlCodes codes, bool training = false,
             nn::Rng* dropout_rng = nullptr) const;
  // Row-stochastic n x V matrix.
  Matrix forward(std::span<const int> masked_ids, ControlCodes codes) const;

  // softmax(logits) times the token embedding table: n x d.
  Var soft_embeddings(const Var& logits) const;

  // Argmax over decodable tokens (ordinary tokens and <unk>).
  int decode_position(const Matrix& probs, Eigen::Index row) const;

  const SmlmConfig& config() const { return config_; }
  int vocab_size() const { return vocab_size_; }
  int num_styles() const { return num_styles_; }
  int src_code(int label) const { return src_base_ + label; }
  int dst_code(int label) const { return dst_base_ + label; }
  nn::ParamList& params() { return params_; }
  const nn::ParamList& params() const { return params_; }

 private:
  SmlmConfig config_;
  int vocab_size_;
  int num_styles_;
  int src_base_;
  int dst_base_;
  int first_ordinary_;
  nn::ParamList params_;
  Var token_embedding_;
  Var position_embedding_;
  std::vector<nn::TransformerEncoderLayer> layers_;
  nn::LayerNorm final_norm_;
  Var output_bias_;
};

SmlmModel build_smlm(const SmlmConfig& config, const Vocabulary& vocab);

// Style classifier over the mean of per-position soft embeddings.
class StyleClassifierHead {
 public:
  StyleClassifierHead(int embedding_dim, int num_styles, std::uint64_t seed);
  StyleClassifierHead(StyleClassifierHead&&) = default;
  StyleClassifierHead& operator=(StyleClassifierHead&&) = default;
  StyleClassifierHead(const StyleClassifierHead&) = delete;
  StyleClassifierHead& operator=(const StyleClassifierHead&) = delete;

  Var logits(const Var& position_embeddings) const;  // 1 x num_styles
  nn::ParamList& params() { return params_; }
  const nn::ParamList& params() const { return params_; }

 private:
  nn::ParamList params_;
  nn::Linear affine_;
};

struct ReconstructionStats {
  double masked_accuracy = 0.0;
  double unmasked_accuracy = 0.0;
  std::size_t masked_positions = 0;
  std::size_t unmasked_positions = 0;
};

struct EpochLog {
  std::string stage;
  int epoch = 0;
  double loss = 0.0;
  double masked_accuracy = 0.0;
  double unmasked_accuracy = 0.0;
  double cls_loss = 0.0;
  double adversarial_loss = 0.0;
  double max_clipped_grad_norm = 0.0;

  nlohmann::json to_json() const;
};

// Same-style reconstruction: -log q(x^s | x^{m_s}, [src]=[dst]=s). Throws
// TrainingError on a non-finite loss.
std::vector<EpochLog> bootstrap_train(SmlmModel& model, std::span<const masking::StyleMaskedSentence> pairs,
                                      const Vocabulary& vocab);

// Alternating adversarial fine-tuning: the head is fitted to same-style
// reconstructions and pushed away from transfer outputs; the encoder then
// minimises L_BS + lambda_sta * -log p_cls(dst | transfer output).
std::vector<EpochLog> finetune(SmlmModel& model, StyleClassifierHead& head,
                               std::span<const masking::StyleMaskedSentence> pairs, const Vocabulary& vocab);

ReconstructionStats reconstruction_accuracy(const SmlmModel& model,
                                            std::span<const masking::StyleMaskedSentence> pairs,
                                            const Vocabulary& vocab);

// Decodes a masked sentence under the given destination style. Unmasked
// positions are copied from the source unless hard copy-through is off.
Tokens decode_transfer(const SmlmModel& model, const masking::StyleMaskedSentence& masked, int dst,
                       const Vocabulary& vocab);

Tokens transfer(const SmlmModel& model, const LabeledExample& example, const masking::Attributor& attributor,
                double lambda_epsilon, int dst, const Vocabulary& vocab);

std::vector<Tokens> transfer_batch(const SmlmModel& model, std::span<const LabeledExample> examples,
                                   const masking::Attributor& attributor, double lambda_epsilon,
                                   std::span<const int> dst, const Vocabulary& vocab);

// Checkpoint directory: weights.bin (+ .json), config.json, vocab.txt,
// train_log.jsonl and, when present, head.bin.
void save_smlm(const std::filesystem::path& dir, const SmlmModel& model, const Vocabulary& vocab,
               std::span<const EpochLog> log, const StyleClassifierHead* head = nullptr);
SmlmModel load_smlm(const std::filesystem::path& dir, const Vocabulary& vocab);
StyleClassifierHead load_head(const std::filesystem::path& dir, const SmlmModel& model);

}  // namespace smlm::mlm
