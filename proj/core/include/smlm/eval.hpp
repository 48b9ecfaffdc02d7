#pragma once

// Metric harness: the Bi-LSTM evaluation classifier, transfer metrics,
// masked-sequence quality, the lambda_epsilon sweep and masking F1.

#include "smlm/attribution.hpp"
#include "smlm/corpus.hpp"
#include "smlm/masking.hpp"
#include "smlm/nn.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace smlm::eval {

using ad::Matrix;
using ad::Var;

struct EvalClassifierConfig {
  int embedding_dim = 64;
  int hidden_dim = 64;
  int epochs = 5;
  double learning_rate = 2e-3;
  int batch_size = 32;
  std::uint64_t seed = 1;
};

// Bidirectional LSTM; the final forward state and the first backward state
// are concatenated and fed to a linear layer.
class EvalClassifier final : public attribution::EmbeddingClassifier {
 public:
  EvalClassifier(const EvalClassifierConfig& config, int vocab_size, int num_classes);
  EvalClassifier(EvalClassifier&&) = default;
  EvalClassifier& operator=(EvalClassifier&&) = default;
  EvalClassifier(const EvalClassifier&) = delete;
  EvalClassifier& operator=(const EvalClassifier&) = delete;

  Matrix embed(std::span<const int> ids) const override;
  Var logits_from_embeddings(const Var& embeddings) const override;
  int num_classes() const override { return num_classes_; }
  // Trainable logits for token ids (gradients reach the embedding table).
  Var logits(std::span<const int> ids) const;

  const EvalClassifierConfig& config() const { return config_; }
  nn::ParamList& params() { return params_; }
  const nn::ParamList& params() const { return params_; }

  double dev_accuracy = 0.0;

  void save(const std::filesystem::path& path) const;
  static EvalClassifier load(const std::filesystem::path& path);

 private:
  EvalClassifierConfig config_;
  int vocab_size_;
  int num_classes_;
  nn::ParamList params_;
  Var embedding_;
  nn::Lstm forward_lstm_;
  nn::Lstm backward_lstm_;
  nn::Linear output_;
};

EvalClassifier train_eval_classifier(const Corpus& corpus, const Vocabulary& vocab,
                                     const EvalClassifierConfig& config);

// <mask> is fed to the classifier as <unk>.
std::vector<int> encode_for_classifier(std::span<const std::string> tokens, const Vocabulary& vocab);
std::vector<int> classify(const EvalClassifier& clf, std::span<const Tokens> sentences, const Vocabulary& vocab);

// 100 x fraction of outputs classified as their target label.
double tst_percent(const EvalClassifier& clf, std::span<const Tokens> outputs, std::span<const int> targets,
                   const Vocabulary& vocab);

// Corpus BLEU in [0, 100]: clipped n-gram precisions for n = 1..max_n
// against all references, closest-reference brevity penalty, no smoothing.
double bleu(std::span<const Tokens> candidates, std::span<const std::vector<Tokens>> reference_sets, int max_n = 4);
double bleu(std::span<const Tokens> candidates, std::span<const Tokens> references, int max_n = 4);

// Mean sentence-level LCS F-measure with beta = 1.2, in [0, 1].
double rouge_l(std::span<const Tokens> candidates, std::span<const Tokens> references);
double rouge_l_sentence(std::span<const std::string> candidate, std::span<const std::string> reference);

struct EvalReport {
  double tst_percent = 0.0;
  double s_bleu = 0.0;
  std::optional<double> r_bleu;
  double rouge_l = 0.0;
  double mean2 = 0.0;  // (tst_percent + s_bleu) / 2
  std::size_t n_examples = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

// ROUGE-L is computed against references when present, otherwise against
// the sources.
EvalReport evaluate_transfer(const EvalClassifier& clf, std::span<const Tokens> outputs,
                             std::span<const LabeledExample> sources, std::span<const int> targets,
                             const Vocabulary& vocab);

struct MaskQualityRow {
  std::string method;
  double acc_percent = 0.0;           // against true source labels
  double acc_consistent_percent = 0.0;  // against the classifier's unmasked predictions
  double s_bleu_masked = 0.0;
  double mask_rate = 0.0;
  std::size_t n_examples = 0;
};

struct MaskQualityReport {
  std::vector<MaskQualityRow> rows;
  double baseline_acc_percent = 0.0;  // unmasked accuracy against true labels

  const MaskQualityRow* find(std::string_view method) const;
};

inline constexpr std::string_view kNoMaskingRow = "No Masking";

MaskQualityRow mask_quality(const EvalClassifier& clf, std::span<const masking::StyleMaskedSentence> masked,
                            std::span<const LabeledExample> sources, std::string method, const Vocabulary& vocab);
MaskQualityRow no_masking_row(const EvalClassifier& clf, std::span<const LabeledExample> sources,
                              const Vocabulary& vocab);

struct SweepPoint {
  double lambda_epsilon = 0.0;
  double acc_percent = 0.0;
  double s_bleu_masked = 0.0;
  double mask_rate = 0.0;
};

struct SweepCurve {
  std::string method;
  std::vector<SweepPoint> points;
};

// Attributes every sentence once and re-thresholds at each grid point. The
// grid must be strictly increasing within [0, 1].
SweepCurve lambda_sweep(const EvalClassifier& clf, std::span<const LabeledExample> examples,
                        const Vocabulary& vocab, const masking::Attributor& attributor,
                        std::span<const double> grid, std::string method = "EA");

struct MaskingF1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Micro-averaged over all token positions.
MaskingF1 masking_f1(std::span<const masking::StyleMaskedSentence> masked,
                     std::span<const std::vector<std::size_t>> planted);

nlohmann::json to_json(const EvalReport& report);
nlohmann::json to_json(const MaskQualityReport& report);
nlohmann::json to_json(const SweepCurve& curve);
nlohmann::json to_json(const MaskingF1& f1);
EvalReport eval_report_from_json(const nlohmann::json& doc);
MaskQualityReport mask_quality_from_json(const nlohmann::json& doc);
SweepCurve sweep_curve_from_json(const nlohmann::json& doc);

std::string format_table(const EvalReport& report);
std::string format_table(const MaskQualityReport& report);
std::string format_table(const SweepCurve& curve);
std::string sweep_csv(const SweepCurve& curve);

}  // namespace smlm::eval
