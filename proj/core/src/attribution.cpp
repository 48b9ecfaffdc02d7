#include "smlm/attribution.hpp"

#include "smlm/checkpoint.hpp"
#include "smlm/error.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace smlm::attribution {

namespace {

constexpr double kMeanNormEps = 1e-8;

Var as_var(const Matrix& m, bool grad) { return grad ? ad::parameter(m) : ad::constant(m); }

}  // namespace

std::string_view method_tag(Method m) {
  switch (m) {
    case Method::kVanillaAttention: return "VA";
    case Method::kExplainableAttention: return "EA";
    case Method::kVanillaGradients: return "VG";
    case Method::kGradientsTimesInput: return "GxX";
    case Method::kIntegratedGradients: return "IG";
  }
  return "?";
}

Method parse_method(std::string_view tag) {
  for (Method m : kAllMethods) {
    if (method_tag(m) == tag) return m;
  }
  if (tag == "vanilla_attention") return Method::kVanillaAttention;
  if (tag == "explainable_attention") return Method::kExplainableAttention;
  if (tag == "vanilla_gradients") return Method::kVanillaGradients;
  if (tag == "gradients_times_input") return Method::kGradientsTimesInput;
  if (tag == "integrated_gradients") return Method::kIntegratedGradients;
  throw ConfigError("unknown attribution method '" + std::string(tag) + "'");
}

bool is_gradient_method(Method m) {
  return m == Method::kVanillaGradients || m == Method::kGradientsTimesInput || m == Method::kIntegratedGradients;
}

void AttributionMethod::validate() const {
  if (ig_steps < 1) throw ConfigError("integrated gradients step count must be >= 1");
}

// ------------------------------------------------------------------ conicity

double atm(const ad::RowVector& v, const Matrix& set) {
  if (set.rows() == 0) throw std::invalid_argument("atm: empty vector set");
  const ad::RowVector mean = set.colwise().mean();
  const double mean_norm = mean.norm();
  const double v_norm = v.norm();
  if (mean_norm < kMeanNormEps || v_norm < kMeanNormEps) return 0.0;
  // 1 - |u - w|^2 / 2 on unit vectors: rounding in the normalisation is
  // squared away, so parallel vectors give exactly 1.
  const double gap = (v / v_norm - mean / mean_norm).squaredNorm();
  return std::clamp(1.0 - 0.5 * gap, -1.0, 1.0);
}

double conicity(const Matrix& set) {
  if (set.rows() == 0) throw std::invalid_argument("conicity: empty vector set");
  double total = 0.0;
  for (Eigen::Index i = 0; i < set.rows(); ++i) total += atm(set.row(i), set);
  return total / static_cast<double>(set.rows());
}

Var conicity(const Var& set) {
  if (set.rows() == 0) throw std::invalid_argument("conicity: empty vector set");
  const Var mean = ad::mean_rows(set);
  if (mean.value().norm() < kMeanNormEps) return ad::constant(Matrix::Zero(1, 1));
  const Var cosines = ad::matmul_nt(ad::normalize_rows(set, kMeanNormEps), ad::normalize_rows(mean, kMeanNormEps));
  return ad::mean_all(cosines);
}

// ---------------------------------------------------------------- classifier

int EmbeddingClassifier::predict(std::span<const int> ids) const {
  ad::NoGradGuard guard;
  const Matrix logits = logits_from_embeddings(ad::constant(embed(ids))).value();
  Eigen::Index best = 0;
  logits.row(0).maxCoeff(&best);
  return static_cast<int>(best);
}

DiversityLstm::DiversityLstm(const DiversityLstmConfig& config, int vocab_size, int num_classes)
    : config_(config), vocab_size_(vocab_size), num_classes_(num_classes) {
  if (config.embedding_dim <= 0 || config.hidden_dim <= 0) throw ConfigError("diversity lstm: dims must be positive");
  if (config.lambda_con < 0) throw ConfigError("diversity lstm: lambda_con must be >= 0");
  if (num_classes < 2) throw ConfigError("diversity lstm: at least 2 classes required");
  nn::Rng rng(config.seed);
  embedding_ = params_.add("embedding", nn::normal_init(vocab_size, config.embedding_dim, 0.1, rng));
  lstm_ = nn::Lstm(params_, "lstm", config.embedding_dim, config.hidden_dim, rng);
  attention_proj_ = nn::Linear(params_, "attention.proj", config.hidden_dim, config.hidden_dim, rng);
  attention_vector_ = params_.add("attention.v", nn::xavier_uniform(config.hidden_dim, 1, rng));
  output_ = nn::Linear(params_, "output", config.hidden_dim, num_classes, rng);
}

DiversityLstm::Forward DiversityLstm::forward_embeddings(const Var& embeddings) const {
  Forward f;
  f.hidden = lstm_(embeddings);
  const Var scores = ad::matmul(ad::tanh(attention_proj_(f.hidden)), attention_vector_);  // T x 1
  f.attention = ad::softmax_rows(ad::transpose(scores));
  const Var context = ad::matmul(f.attention, f.hidden);
  f.logits = output_(context);
  return f;
}

DiversityLstm::Forward DiversityLstm::forward(std::span<const int> ids) const {
  return forward_embeddings(ad::gather_rows(embedding_, ids));
}

Matrix DiversityLstm::embed(std::span<const int> ids) const {
  Matrix out(static_cast<Eigen::Index>(ids.size()), embedding_.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab_size_) throw std::out_of_range("token id out of range");
    out.row(static_cast<Eigen::Index>(i)) = embedding_.value().row(ids[i]);
  }
  return out;
}

Var DiversityLstm::logits_from_embeddings(const Var& embeddings) const { return forward_embeddings(embeddings).logits; }

std::optional<ad::RowVector> DiversityLstm::unk_embedding() const {
  return ad::RowVector(embedding_.value().row(Vocabulary::kUnk));
}

std::vector<double> DiversityLstm::attention_weights(std::span<const int> ids) const {
  ad::NoGradGuard guard;
  const Matrix a = forward(ids).attention.value();
  return std::vector<double>(a.data(), a.data() + a.size());
}

double DiversityLstm::hidden_conicity(std::span<const int> ids) const {
  ad::NoGradGuard guard;
  return conicity(forward(ids).hidden.value());
}

void DiversityLstm::save(const std::filesystem::path& path) const {
  nlohmann::json meta;
  meta["kind"] = "diversity_lstm";
  meta["vocab_size"] = vocab_size_;
  meta["num_classes"] = num_classes_;
  meta["config"] = {{"embedding_dim", config_.embedding_dim}, {"hidden_dim", config_.hidden_dim},
                    {"lambda_con", config_.lambda_con},       {"epochs", config_.epochs},
                    {"learning_rate", config_.learning_rate}, {"batch_size", config_.batch_size},
                    {"seed", config_.seed}};
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : history) {
    hist.push_back({{"epoch", r.epoch},
                    {"classification_loss", r.classification_loss},
                    {"conicity", r.conicity},
                    {"dev_accuracy", r.dev_accuracy}});
  }
  meta["history"] = hist;
  save_checkpoint(path, params_, meta);
}

DiversityLstm DiversityLstm::load(const std::filesystem::path& path) {
  const auto meta = read_checkpoint_metadata(path);
  if (meta.value("kind", "") != "diversity_lstm") throw ParseError(path.string() + ": not a diversity lstm checkpoint");
  const auto& c = meta.at("config");
  DiversityLstmConfig config;
  config.embedding_dim = c.at("embedding_dim");
  config.hidden_dim = c.at("hidden_dim");
  config.lambda_con = c.at("lambda_con");
  config.epochs = c.at("epochs");
  config.learning_rate = c.at("learning_rate");
  config.batch_size = c.at("batch_size");
  config.seed = c.at("seed");
  DiversityLstm model(config, meta.at("vocab_size"), meta.at("num_classes"));
  load_checkpoint(path, model.params_);
  for (const auto& r : meta.at("history")) {
    model.history.push_back({r.at("epoch"), r.at("classification_loss"), r.at("conicity"), r.at("dev_accuracy")});
  }
  return model;
}

double accuracy(const EmbeddingClassifier& model, const Corpus& corpus, const Vocabulary& vocab, Split split) {
  const auto& examples = corpus.split(split);
  if (examples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    if (model.predict(encode(ex.tokens, vocab)) == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

double mean_hidden_conicity(const DiversityLstm& model, const Corpus& corpus, const Vocabulary& vocab, Split split) {
  const auto& examples = corpus.split(split);
  if (examples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ex : examples) total += model.hidden_conicity(encode(ex.tokens, vocab));
  return total / static_cast<double>(examples.size());
}

DiversityLstm train_diversity_lstm(const Corpus& corpus, const Vocabulary& vocab, const DiversityLstmConfig& config) {
  if (corpus.num_styles() < 2) throw ConfigError("train_diversity_lstm: corpus needs >= 2 labels");
  if (config.epochs < 0 || config.batch_size < 1) throw ConfigError("train_diversity_lstm: bad epochs/batch size");
  DiversityLstm model(config, vocab.size(), static_cast<int>(corpus.num_styles()));
  const auto& train = corpus.split(Split::kTrain);
  std::vector<std::vector<int>> encoded;
  encoded.reserve(train.size());
  for (const auto& ex : train) encoded.push_back(encode(ex.tokens, vocab));

  nn::Adam optimizer(model.params().vars(), {.learning_rate = config.learning_rate});
  nn::Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double nll_total = 0.0;
    double con_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      optimizer.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        const auto f = model.forward(encoded[idx]);
        const int label = train[idx].label;
        const Var nll = ad::nll_rows(ad::log_softmax_rows(f.logits), std::span<const int>(&label, 1));
        const Var con = conicity(f.hidden);
        const Var loss = ad::add(nll, ad::scale(con, config.lambda_con));
        if (!std::isfinite(loss.scalar())) {
          throw TrainingError("diversity lstm: non-finite loss at epoch " + std::to_string(epoch));
        }
        nll_total += nll.scalar();
        con_total += con.scalar();
        ad::backward(ad::scale(loss, inv_batch));
      }
      optimizer.step();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.classification_loss = nll_total / static_cast<double>(std::max<std::size_t>(1, order.size()));
    rec.conicity = con_total / static_cast<double>(std::max<std::size_t>(1, order.size()));
    rec.dev_accuracy = accuracy(model, corpus, vocab, Split::kDev);
    model.history.push_back(rec);
    spdlog::info("diversity-lstm epoch {}: nll={:.4f} conicity={:.4f} dev_acc={:.4f} (lambda_con={})", epoch,
                 rec.classification_loss, rec.conicity, rec.dev_accuracy, config.lambda_con);
  }
  optimizer.zero_grad();
  return model;
}

// -------------------------------------------------------------- attributions

AttributionVector normalize_scores(std::vector<double> raw_magnitudes, Method method) {
  AttributionVector out;
  out.method = method;
  const double total = std::accumulate(raw_magnitudes.begin(), raw_magnitudes.end(), 0.0);
  out.scores.resize(raw_magnitudes.size());
  if (!(total > 0.0) || !std::isfinite(total)) {
    std::fill(out.scores.begin(), out.scores.end(), 1.0 / static_cast<double>(raw_magnitudes.size()));
    out.uniform_fallback = true;
    out.warnings.emplace_back("zero attribution mass; uniform distribution returned");
  } else {
    for (std::size_t i = 0; i < raw_magnitudes.size(); ++i) out.scores[i] = raw_magnitudes[i] / total;
  }
  return out;
}

AttributionVector attention_scores(const DiversityLstm& model, std::span<const int> ids, Method method) {
  if (method == Method::kExplainableAttention && !model.is_diversity_trained()) {
    throw ConfigError("explainable attention requires a model trained with lambda_con > 0");
  }
  if (method == Method::kVanillaAttention && model.is_diversity_trained()) {
    throw ConfigError("vanilla attention requires a model trained with lambda_con = 0");
  }
  if (method != Method::kExplainableAttention && method != Method::kVanillaAttention) {
    throw std::invalid_argument("attention_scores: not an attention method");
  }
  AttributionVector out;
  out.method = method;
  out.scores = model.attention_weights(ids);
  out.raw = out.scores;
  return out;
}

double logit_value(const EmbeddingClassifier& model, const Matrix& embeddings, int target_class) {
  ad::NoGradGuard guard;
  return model.logits_from_embeddings(ad::constant(embeddings)).value()(0, target_class);
}

Matrix logit_gradient(const EmbeddingClassifier& model, const Matrix& embeddings, int target_class) {
  const Var input = as_var(embeddings, true);
  const Var logits = model.logits_from_embeddings(input);
  const Var target = ad::slice_cols(logits, target_class, 1);
  return ad::gradients(target, std::span<const Var>(&input, 1)).front();
}

AttributionVector vanilla_gradients(const EmbeddingClassifier& model, std::span<const int> ids) {
  const Matrix emb = model.embed(ids);
  const Matrix grad = logit_gradient(model, emb, model.predict(ids));
  std::vector<double> mags(static_cast<std::size_t>(emb.rows()));
  for (Eigen::Index t = 0; t < emb.rows(); ++t) mags[static_cast<std::size_t>(t)] = grad.row(t).norm();
  auto out = normalize_scores(mags, Method::kVanillaGradients);
  out.raw = std::move(mags);
  return out;
}

AttributionVector gradients_times_input(const EmbeddingClassifier& model, std::span<const int> ids) {
  const Matrix emb = model.embed(ids);
  const Matrix grad = logit_gradient(model, emb, model.predict(ids));
  std::vector<double> raw(static_cast<std::size_t>(emb.rows()));
  std::vector<double> mags(raw.size());
  for (Eigen::Index t = 0; t < emb.rows(); ++t) {
    raw[static_cast<std::size_t>(t)] = grad.row(t).dot(emb.row(t));
    mags[static_cast<std::size_t>(t)] = std::abs(raw[static_cast<std::size_t>(t)]);
  }
  auto out = normalize_scores(mags, Method::kGradientsTimesInput);
  out.raw = std::move(raw);
  return out;
}

AttributionVector integrated_gradients(const EmbeddingClassifier& model, std::span<const int> ids, int steps,
                                       IgBaseline baseline_kind) {
  if (steps < 1) throw ConfigError("integrated gradients step count must be >= 1");
  const Matrix emb = model.embed(ids);
  Matrix baseline = Matrix::Zero(emb.rows(), emb.cols());
  if (baseline_kind == IgBaseline::kUnkEmbedding) {
    const auto unk = model.unk_embedding();
    if (!unk) throw ConfigError("model has no <unk> embedding for the IG baseline");
    baseline.rowwise() = *unk;
  }
  const int target = model.predict(ids);
  const Matrix delta = emb - baseline;
  Matrix grad_sum = Matrix::Zero(emb.rows(), emb.cols());
  for (int k = 0; k < steps; ++k) {
    const double alpha = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
    grad_sum += logit_gradient(model, baseline + alpha * delta, target);
  }
  const Matrix contributions = delta.cwiseProduct(grad_sum) / static_cast<double>(steps);
  std::vector<double> raw(static_cast<std::size_t>(emb.rows()));
  std::vector<double> mags(raw.size());
  for (Eigen::Index t = 0; t < emb.rows(); ++t) {
    raw[static_cast<std::size_t>(t)] = contributions.row(t).sum();
    mags[static_cast<std::size_t>(t)] = std::abs(raw[static_cast<std::size_t>(t)]);
  }
  auto out = normalize_scores(mags, Method::kIntegratedGradients);
  out.raw = std::move(raw);

  const double gap = logit_value(model, emb, target) - logit_value(model, baseline, target);
  const double total = std::accumulate(out.raw.begin(), out.raw.end(), 0.0);
  if (std::abs(total - gap) > 0.01 * std::abs(gap)) {
    out.warnings.push_back("integrated gradients completeness gap " + std::to_string(std::abs(total - gap)) +
                           " exceeds 1% of f(x)-f(baseline); increase steps");
  }
  return out;
}

AttributionVector attribute(const AttributionMethod& method, const DiversityLstm& model, std::span<const int> ids) {
  method.validate();
  switch (method.method) {
    case Method::kVanillaAttention:
    case Method::kExplainableAttention:
      return attention_scores(model, ids, method.method);
    case Method::kVanillaGradients:
      return vanilla_gradients(model, ids);
    case Method::kGradientsTimesInput:
      return gradients_times_input(model, ids);
    case Method::kIntegratedGradients:
      return integrated_gradients(model, ids, method.ig_steps, method.ig_baseline);
  }
  throw std::invalid_argument("attribute: unknown method");
}

}  // namespace smlm::attribution
