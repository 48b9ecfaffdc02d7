#pragma once

// Token attribution: the diversity-regularised attention classifier
// (Explainable Attention) and the gradient-based comparison methods.

#include "smlm/autograd.hpp"
#include "smlm/corpus.hpp"
#include "smlm/nn.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace smlm::attribution {

using ad::Matrix;
using ad::Var;

enum class Method {
  kVanillaAttention,
  kExplainableAttention,
  kVanillaGradients,
  kGradientsTimesInput,
  kIntegratedGradients,
};

std::string_view method_tag(Method m);  // VA, EA, VG, GxX, IG
Method parse_method(std::string_view tag);
inline constexpr Method kAllMethods[] = {Method::kVanillaAttention, Method::kExplainableAttention,
                                         Method::kVanillaGradients, Method::kGradientsTimesInput,
                                         Method::kIntegratedGradients};
bool is_gradient_method(Method m);

enum class IgBaseline { kZero, kUnkEmbedding };

struct AttributionMethod {
  Method method = Method::kExplainableAttention;
  int ig_steps = 50;
  IgBaseline ig_baseline = IgBaseline::kZero;

  void validate() const;
};

struct AttributionVector {
  std::vector<double> scores;  // non-negative, sums to 1
  Method method = Method::kExplainableAttention;
  // Per-token values before the absolute value and normalisation. For IG
  // these are the signed path-integral sums used for completeness checks.
  std::vector<double> raw;
  bool uniform_fallback = false;
  std::vector<std::string> warnings;
};

// Alignment to mean: cosine(v, mean(rows of set)); 0 when the mean norm is
// below 1e-8.
double atm(const ad::RowVector& v, const Matrix& set);
// Mean ATM over the rows of `set`.
double conicity(const Matrix& set);
// Differentiable conicity of the rows of `set`.
Var conicity(const Var& set);

// A classifier whose logits are a differentiable function of the input
// token embeddings. Gradient attributions are defined over this interface.
class EmbeddingClassifier {
 public:
  virtual ~EmbeddingClassifier() = default;
  virtual Matrix embed(std::span<const int> ids) const = 0;
  virtual Var logits_from_embeddings(const Var& embeddings) const = 0;  // 1 x num_classes
  virtual int num_classes() const = 0;
  virtual std::optional<ad::RowVector> unk_embedding() const { return std::nullopt; }

  int predict(std::span<const int> ids) const;
};

struct DiversityLstmConfig {
  int embedding_dim = 128;
  int hidden_dim = 128;
  double lambda_con = 10.0;
  int epochs = 10;
  double learning_rate = 3e-3;
  int batch_size = 32;
  std::uint64_t seed = 1;
};

struct EpochRecord {
  int epoch = 0;
  double classification_loss = 0.0;
  double conicity = 0.0;
  double dev_accuracy = 0.0;
};

class DiversityLstm final : public EmbeddingClassifier {
 public:
  DiversityLstm(const DiversityLstmConfig& config, int vocab_size, int num_classes);
  DiversityLstm(DiversityLstm&&) = default;
  DiversityLstm& operator=(DiversityLstm&&) = default;
  // Parameters are shared handles; copying would alias them.
  DiversityLstm(const DiversityLstm&) = delete;
  DiversityLstm& operator=(const DiversityLstm&) = delete;

  struct Forward {
    Var logits;     // 1 x C
    Var attention;  // 1 x T
    Var hidden;     // T x H
  };
  Forward forward_embeddings(const Var& embeddings) const;
  Forward forward(std::span<const int> ids) const;

  Matrix embed(std::span<const int> ids) const override;
  Var logits_from_embeddings(const Var& embeddings) const override;
  int num_classes() const override { return num_classes_; }
  std::optional<ad::RowVector> unk_embedding() const override;

  std::vector<double> attention_weights(std::span<const int> ids) const;
  double hidden_conicity(std::span<const int> ids) const;

  const DiversityLstmConfig& config() const { return config_; }
  int vocab_size() const { return vocab_size_; }
  bool is_diversity_trained() const { return config_.lambda_con > 0.0; }
  nn::ParamList& params() { return params_; }
  const nn::ParamList& params() const { return params_; }

  std::vector<EpochRecord> history;

  void save(const std::filesystem::path& path) const;
  static DiversityLstm load(const std::filesystem::path& path);

 private:
  DiversityLstmConfig config_;
  int vocab_size_;
  int num_classes_;
  nn::ParamList params_;
  Var embedding_;
  nn::Lstm lstm_;
  nn::Linear attention_proj_;  // W, b
  Var attention_vector_;       // v
  nn::Linear output_;
};

// Minimises NLL + lambda_con * conicity(H) with Adam. Throws TrainingError
// on a non-finite loss.
DiversityLstm train_diversity_lstm(const Corpus& corpus, const Vocabulary& vocab, const DiversityLstmConfig& config);

double accuracy(const EmbeddingClassifier& model, const Corpus& corpus, const Vocabulary& vocab, Split split);
double mean_hidden_conicity(const DiversityLstm& model, const Corpus& corpus, const Vocabulary& vocab, Split split);

// Attention distribution; EA needs a diversity-trained model, VA one trained
// with lambda_con = 0.
AttributionVector attention_scores(const DiversityLstm& model, std::span<const int> ids, Method method);

AttributionVector vanilla_gradients(const EmbeddingClassifier& model, std::span<const int> ids);
AttributionVector gradients_times_input(const EmbeddingClassifier& model, std::span<const int> ids);
AttributionVector integrated_gradients(const EmbeddingClassifier& model, std::span<const int> ids, int steps,
                                       IgBaseline baseline = IgBaseline::kZero);

// Gradient of the target-class logit w.r.t. the input embeddings (T x d).
Matrix logit_gradient(const EmbeddingClassifier& model, const Matrix& embeddings, int target_class);
double logit_value(const EmbeddingClassifier& model, const Matrix& embeddings, int target_class);

AttributionVector attribute(const AttributionMethod& method, const DiversityLstm& model, std::span<const int> ids);

// Non-negative scores -> distribution; all-zero mass yields uniform with the
// fallback flag set.
AttributionVector normalize_scores(std::vector<double> raw_magnitudes, Method method);

}  // namespace smlm::attribution
