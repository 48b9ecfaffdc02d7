#include "smlm/style_mlm.hpp"

#include "smlm/checkpoint.hpp"
#include "smlm/error.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace smlm::mlm {

namespace {

int other_style(int s, int num_styles, nn::Rng& rng) {
  if (num_styles == 2) return 1 - s;
  std::uniform_int_distribution<int> pick(0, num_styles - 2);
  const int k = pick(rng);
  return k >= s ? k + 1 : k;
}

struct EncodedPair {
  std::vector<int> masked;
  std::vector<int> original;
  std::vector<std::uint8_t> is_masked;
  int style = 0;
};

std::vector<EncodedPair> encode_pairs(std::span<const masking::StyleMaskedSentence> pairs, const Vocabulary& vocab) {
  std::vector<EncodedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    EncodedPair e;
    e.masked = encode(p.tokens, vocab);
    e.original = encode(p.original.tokens, vocab);
    e.is_masked = p.mask();
    e.style = p.source_style;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<int> loss_targets(const EncodedPair& e, bool masked_only) {
  std::vector<int> t = e.original;
  if (masked_only) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!e.is_masked[i]) t[i] = -1;
    }
  }
  return t;
}

void tally(const SmlmModel& model, const Matrix& logits, const EncodedPair& e, ReconstructionStats& stats,
           std::size_t& masked_hits, std::size_t& unmasked_hits) {
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const bool hit = model.decode_position(logits, r) == e.original[static_cast<std::size_t>(r)];
    if (e.is_masked[static_cast<std::size_t>(r)]) {
      ++stats.masked_positions;
      masked_hits += hit ? 1 : 0;
    } else {
      ++stats.unmasked_positions;
      unmasked_hits += hit ? 1 : 0;
    }
  }
}

void finish(ReconstructionStats& stats, std::size_t masked_hits, std::size_t unmasked_hits) {
  stats.masked_accuracy =
      stats.masked_positions ? static_cast<double>(masked_hits) / static_cast<double>(stats.masked_positions) : 0.0;
  stats.unmasked_accuracy = stats.unmasked_positions ? static_cast<double>(unmasked_hits) /
                                                           static_cast<double>(stats.unmasked_positions)
                                                     : 0.0;
}

std::vector<Matrix> snapshot(const nn::ParamList& params) {
  std::vector<Matrix> out;
  for (const auto& p : params.items()) out.push_back(p.var.value());
  return out;
}

void restore(nn::ParamList& params, const std::vector<Matrix>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) params.items()[i].var.node()->value = values[i];
}

}  // namespace

void SmlmConfig::validate() const {
  if (layers <= 0 || heads <= 0 || embedding_dim <= 0 || ff_dim <= 0 || max_length < 3) {
    throw ConfigError("smlm: layer/head/dimension counts must be positive");
  }
  if (embedding_dim % heads != 0) throw ConfigError("smlm: embedding_dim must be divisible by heads");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("smlm: dropout must lie in [0, 1)");
  if (bootstrap_epochs < 0 || finetune_epochs < 0) throw ConfigError("smlm: epoch counts must be >= 0");
  if (batch_size < 1 || finetune_batch_size < 1) throw ConfigError("smlm: batch sizes must be positive");
  if (lambda_sta < 0.0 || adversarial_ratio < 0.0) throw ConfigError("smlm: loss weights must be >= 0");
  if (!(clip_threshold > 0.0)) throw ConfigError("smlm: clip_threshold must be positive");
  if (!(learning_rate > 0.0) || !(finetune_learning_rate > 0.0) || !(head_learning_rate > 0.0)) {
    throw ConfigError("smlm: learning rates must be positive");
  }
}

nlohmann::json SmlmConfig::to_json() const {
  return {{"layers", layers},
          {"heads", heads},
          {"embedding_dim", embedding_dim},
          {"ff_dim", ff_dim},
          {"dropout", dropout},
          {"max_length", max_length},
          {"bootstrap_epochs", bootstrap_epochs},
          {"finetune_epochs", finetune_epochs},
          {"lambda_sta", lambda_sta},
          {"clip_threshold", clip_threshold},
          {"learning_rate", learning_rate},
          {"finetune_learning_rate", finetune_learning_rate},
          {"head_learning_rate", head_learning_rate},
          {"batch_size", batch_size},
          {"finetune_batch_size", finetune_batch_size},
          {"adversarial_ratio", adversarial_ratio},
          {"masked_only_loss", masked_only_loss},
          {"hard_copy_through", hard_copy_through},
          {"seed", seed}};
}

SmlmConfig SmlmConfig::from_json(const nlohmann::json& doc) {
  SmlmConfig c;
  c.layers = doc.value("layers", c.layers);
  c.heads = doc.value("heads", c.heads);
  c.embedding_dim = doc.value("embedding_dim", c.embedding_dim);
  c.ff_dim = doc.value("ff_dim", c.ff_dim);
  c.dropout = doc.value("dropout", c.dropout);
  c.max_length = doc.value("max_length", c.max_length);
  c.bootstrap_epochs = doc.value("bootstrap_epochs", c.bootstrap_epochs);
  c.finetune_epochs = doc.value("finetune_epochs", c.finetune_epochs);
  c.lambda_sta = doc.value("lambda_sta", c.lambda_sta);
  c.clip_threshold = doc.value("clip_threshold", c.clip_threshold);
  c.learning_rate = doc.value("learning_rate", c.learning_rate);
  c.finetune_learning_rate = doc.value("finetune_learning_rate", c.finetune_learning_rate);
  c.head_learning_rate = doc.value("head_learning_rate", c.head_learning_rate);
  c.batch_size = doc.value("batch_size", c.batch_size);
  c.finetune_batch_size = doc.value("finetune_batch_size", c.finetune_batch_size);
  c.adversarial_ratio = doc.value("adversarial_ratio", c.adversarial_ratio);
  c.masked_only_loss = doc.value("masked_only_loss", c.masked_only_loss);
  c.hard_copy_through = doc.value("hard_copy_through", c.hard_copy_through);
  c.seed = doc.value("seed", c.seed);
  c.validate();
  return c;
}

nlohmann::json EpochLog::to_json() const {
  return {{"stage", stage},
          {"epoch", epoch},
          {"loss", loss},
          {"masked_accuracy", masked_accuracy},
          {"unmasked_accuracy", unmasked_accuracy},
          {"cls_loss", cls_loss},
          {"adversarial_loss", adversarial_loss},
          {"max_clipped_grad_norm", max_clipped_grad_norm}};
}

// ---------------------------------------------------------------------- model

SmlmModel::SmlmModel(const SmlmConfig& config, const Vocabulary& vocab)
    : config_(config),
      vocab_size_(vocab.size()),
      num_styles_(static_cast<int>(vocab.num_styles())),
      src_base_(vocab.src_code(0)),
      dst_base_(vocab.dst_code(0)),
      first_ordinary_(vocab.first_ordinary_id()) {
  config_.validate();
  nn::Rng rng(config.seed);
  const double std = 1.0 / std::sqrt(static_cast<double>(config.embedding_dim));
  token_embedding_ = params_.add("token_embedding", nn::normal_init(vocab_size_, config.embedding_dim, std, rng));
  position_embedding_ =
      params_.add("position_embedding", nn::normal_init(config.max_length, config.embedding_dim, std, rng));
  for (int l = 0; l < config.layers; ++l) {
    layers_.emplace_back(params_, "layer" + std::to_string(l), config.embedding_dim, config.heads, config.ff_dim,
                         config.dropout, rng);
  }
  final_norm_ = nn::LayerNorm(params_, "final_norm", config.embedding_dim);
  output_bias_ = params_.add("output_bias", Matrix::Zero(1, vocab_size_));
}

Var SmlmModel::logits(std::span<const int> masked_ids, ControlCodes codes, bool training, nn::Rng* dropout_rng) const {
  if (masked_ids.empty()) throw std::invalid_argument("smlm: empty input");
  if (codes.src < 0 || codes.src >= num_styles_ || codes.dst < 0 || codes.dst >= num_styles_) {
    throw std::out_of_range("smlm: invalid control code");
  }
  const auto n = static_cast<Eigen::Index>(masked_ids.size());
  if (n + 2 > config_.max_length) {
    throw std::length_error("smlm: sequence of " + std::to_string(n) + " tokens exceeds max_length " +
                            std::to_string(config_.max_length) + " (with control codes)");
  }
  std::vector<int> ids(masked_ids.begin(), masked_ids.end());
  ids.push_back(src_code(codes.src));
  ids.push_back(dst_code(codes.dst));
  Var x = ad::add(ad::gather_rows(token_embedding_, ids), ad::slice_rows(position_embedding_, 0, n + 2));
  if (training && config_.dropout > 0.0 && dropout_rng != nullptr) {
    x = ad::apply_dropout(x, nn::bernoulli_keep_mask(x.rows(), x.cols(), config_.dropout, *dropout_rng),
                          config_.dropout);
  }
  for (const auto& layer : layers_) x = layer(x, training, dropout_rng);
  const Var tokens = ad::slice_rows(final_norm_(x), 0, n);
  return ad::add_row(ad::matmul_nt(tokens, token_embedding_), output_bias_);
}

Matrix SmlmModel::forward(std::span<const int> masked_ids, ControlCodes codes) const {
  ad::NoGradGuard guard;
  return ad::softmax_rows(logits(masked_ids, codes)).value();
}

Var SmlmModel::soft_embeddings(const Var& token_logits) const {
  return ad::matmul(ad::softmax_rows(token_logits), token_embedding_);
}

int SmlmModel::decode_position(const Matrix& probs, Eigen::Index row) const {
  int best = Vocabulary::kUnk;
  double best_value = probs(row, Vocabulary::kUnk);
  for (int id = first_ordinary_; id < vocab_size_; ++id) {
    if (probs(row, id) > best_value) {
      best_value = probs(row, id);
      best = id;
    }
  }
  return best;
}

SmlmModel build_smlm(const SmlmConfig& config, const Vocabulary& vocab) {
  if (vocab.id(Vocabulary::kMaskToken) != Vocabulary::kMask) throw ConfigError("vocabulary lacks <mask>");
  SmlmModel model(config, vocab);
  spdlog::info("smlm: {} parameters ({} layers, {} heads, dim {})", model.params().scalar_count(), config.layers,
               config.heads, config.embedding_dim);
  return model;
}

StyleClassifierHead::StyleClassifierHead(int embedding_dim, int num_styles, std::uint64_t seed) {
  nn::Rng rng(seed ^ 0x5bd1e995ULL);
  affine_ = nn::Linear(params_, "head", embedding_dim, num_styles, rng);
}

Var StyleClassifierHead::logits(const Var& position_embeddings) const {
  return affine_(ad::mean_rows(position_embeddings));
}

// ------------------------------------------------------------------- training

std::vector<EpochLog> bootstrap_train(SmlmModel& model, std::span<const masking::StyleMaskedSentence> pairs,
                                      const Vocabulary& vocab) {
  const SmlmConfig& config = model.config();
  const auto data = encode_pairs(pairs, vocab);
  nn::Adam optimizer(model.params().vars(), {.learning_rate = config.learning_rate});
  nn::Rng rng(config.seed ^ 0x2545f4914f6cdd1dULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochLog> log;

  for (int epoch = 1; epoch <= config.bootstrap_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_total = 0.0;
    ReconstructionStats stats;
    std::size_t masked_hits = 0, unmasked_hits = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      optimizer.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const EncodedPair& e = data[order[k]];
        const Var logits = model.logits(e.masked, {e.style, e.style}, true, &rng);
        const auto targets = loss_targets(e, config.masked_only_loss);
        const Var loss = ad::nll_rows(ad::log_softmax_rows(logits), targets);
        if (!std::isfinite(loss.scalar())) {
          throw TrainingError("bootstrap: non-finite loss at epoch " + std::to_string(epoch));
        }
        loss_total += loss.scalar();
        tally(model, logits.value(), e, stats, masked_hits, unmasked_hits);
        ad::backward(ad::scale(loss, inv_batch));
      }
      optimizer.step();
    }
    finish(stats, masked_hits, unmasked_hits);
    EpochLog rec;
    rec.stage = "bootstrap";
    rec.epoch = epoch;
    rec.loss = loss_total / static_cast<double>(std::max<std::size_t>(1, data.size()));
    rec.masked_accuracy = stats.masked_accuracy;
    rec.unmasked_accuracy = stats.unmasked_accuracy;
    log.push_back(rec);
    spdlog::info("bootstrap epoch {}: loss={:.4f} masked_acc={:.4f} unmasked_acc={:.4f}", epoch, rec.loss,
                 rec.masked_accuracy, rec.unmasked_accuracy);
  }
  optimizer.zero_grad();
  return log;
}

std::vector<EpochLog> finetune(SmlmModel& model, StyleClassifierHead& head,
                               std::span<const masking::StyleMaskedSentence> pairs, const Vocabulary& vocab) {
  const SmlmConfig& config = model.config();
  const auto data = encode_pairs(pairs, vocab);
  const auto model_vars = model.params().vars();
  const auto head_vars = head.params().vars();
  nn::Adam model_opt(model_vars, {.learning_rate = config.finetune_learning_rate});
  nn::Adam head_opt(head_vars, {.learning_rate = config.head_learning_rate});
  nn::Rng rng(config.seed ^ 0x94d049bb133111ebULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochLog> log;

  for (int epoch = 1; epoch <= config.finetune_epochs; ++epoch) {
    const auto last_good = snapshot(model.params());
    const auto last_good_head = snapshot(head.params());
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog rec;
    rec.stage = "finetune";
    rec.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.finetune_batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.finetune_batch_size));
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      std::vector<int> targets_dst;
      for (std::size_t k = start; k < end; ++k) {
        targets_dst.push_back(other_style(data[order[k]].style, model.num_styles(), rng));
      }

      // Head: fit same-style reconstructions, and label transfer outputs
      // with their source style (the adversarial side of the min-max).
      head_opt.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const EncodedPair& e = data[order[k]];
        const int dst = targets_dst[k - start];
        Var recon_soft, transfer_soft;
        {
          ad::NoGradGuard guard;
          recon_soft = ad::constant(model.soft_embeddings(model.logits(e.masked, {e.style, e.style})).value());
          transfer_soft = ad::constant(model.soft_embeddings(model.logits(e.masked, {e.style, dst})).value());
        }
        const Var cls = ad::nll_rows(ad::log_softmax_rows(head.logits(recon_soft)), std::span<const int>(&e.style, 1));
        const Var adv =
            ad::nll_rows(ad::log_softmax_rows(head.logits(transfer_soft)), std::span<const int>(&e.style, 1));
        rec.cls_loss += cls.scalar();
        ad::backward(ad::scale(ad::add(cls, ad::scale(adv, config.adversarial_ratio)), inv_batch));
      }
      nn::clip_grad_norm(head_vars, config.clip_threshold);
      head_opt.step();
      head_opt.zero_grad();

      // Encoder: reconstruction plus pushing transfer outputs to dst.
      model_opt.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const EncodedPair& e = data[order[k]];
        const int dst = targets_dst[k - start];
        const Var recon = model.logits(e.masked, {e.style, e.style}, true, &rng);
        const Var bs = ad::nll_rows(ad::log_softmax_rows(recon), loss_targets(e, config.masked_only_loss));
        const Var moved = model.logits(e.masked, {e.style, dst}, true, &rng);
        const Var style =
            ad::nll_rows(ad::log_softmax_rows(head.logits(model.soft_embeddings(moved))), std::span<const int>(&dst, 1));
        const Var loss = ad::add(bs, ad::scale(style, config.lambda_sta));
        if (!std::isfinite(loss.scalar())) {
          restore(model.params(), last_good);
          restore(head.params(), last_good_head);
          throw TrainingError("finetune: non-finite loss at epoch " + std::to_string(epoch) +
                              "; parameters restored to the epoch start");
        }
        rec.loss += bs.scalar();
        rec.adversarial_loss += style.scalar();
        ad::backward(ad::scale(loss, inv_batch));
      }
      head_opt.zero_grad();
      nn::clip_grad_norm(model_vars, config.clip_threshold);
      rec.max_clipped_grad_norm = std::max(rec.max_clipped_grad_norm, nn::global_grad_norm(model_vars));
      model_opt.step();
      model_opt.zero_grad();
      if (!model.params().all_finite() || !head.params().all_finite()) {
        restore(model.params(), last_good);
        restore(head.params(), last_good_head);
        throw TrainingError("finetune: non-finite parameters at epoch " + std::to_string(epoch) +
                            "; parameters restored to the epoch start");
      }
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, data.size()));
    rec.loss /= n;
    rec.cls_loss /= n;
    rec.adversarial_loss /= n;
    const auto stats = reconstruction_accuracy(model, pairs, vocab);
    rec.masked_accuracy = stats.masked_accuracy;
    rec.unmasked_accuracy = stats.unmasked_accuracy;
    log.push_back(rec);
    spdlog::info("finetune epoch {}: L_BS={:.4f} L_cls={:.4f} transfer_nll={:.4f} max_grad_norm={:.2e}", epoch,
                 rec.loss, rec.cls_loss, rec.adversarial_loss, rec.max_clipped_grad_norm);
  }
  return log;
}

ReconstructionStats reconstruction_accuracy(const SmlmModel& model,
                                            std::span<const masking::StyleMaskedSentence> pairs,
                                            const Vocabulary& vocab) {
  ReconstructionStats stats;
  std::size_t masked_hits = 0, unmasked_hits = 0;
  for (const auto& e : encode_pairs(pairs, vocab)) {
    const Matrix probs = model.forward(e.masked, {e.style, e.style});
    tally(model, probs, e, stats, masked_hits, unmasked_hits);
  }
  finish(stats, masked_hits, unmasked_hits);
  return stats;
}

// ------------------------------------------------------------------- transfer

Tokens decode_transfer(const SmlmModel& model, const masking::StyleMaskedSentence& masked, int dst,
                       const Vocabulary& vocab) {
  const auto ids = encode(masked.tokens, vocab);
  const Matrix probs = model.forward(ids, {masked.source_style, dst});
  const auto is_masked = masked.mask();
  Tokens out = masked.original.tokens;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (is_masked[i] || !model.config().hard_copy_through) {
      out[i] = vocab.token(model.decode_position(probs, static_cast<Eigen::Index>(i)));
    }
  }
  return out;
}

Tokens transfer(const SmlmModel& model, const LabeledExample& example, const masking::Attributor& attributor,
                double lambda_epsilon, int dst, const Vocabulary& vocab) {
  const auto attr = attributor(encode(example.tokens, vocab));
  const auto mask = masking::attention_surplus_mask(attr.scores, lambda_epsilon);
  return decode_transfer(model, masking::apply_mask(example, mask), dst, vocab);
}

std::vector<Tokens> transfer_batch(const SmlmModel& model, std::span<const LabeledExample> examples,
                                   const masking::Attributor& attributor, double lambda_epsilon,
                                   std::span<const int> dst, const Vocabulary& vocab) {
  if (dst.size() != examples.size()) throw std::invalid_argument("transfer_batch: one destination per example");
  const auto masked = masking::mask_examples(examples, vocab, attributor, lambda_epsilon);
  std::vector<Tokens> out;
  out.reserve(masked.size());
  for (std::size_t i = 0; i < masked.size(); ++i) out.push_back(decode_transfer(model, masked[i], dst[i], vocab));
  return out;
}

// ----------------------------------------------------------------- persistence

void save_smlm(const std::filesystem::path& dir, const SmlmModel& model, const Vocabulary& vocab,
               std::span<const EpochLog> log, const StyleClassifierHead* head) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta{{"kind", "smlm"},
                      {"vocab_size", model.vocab_size()},
                      {"num_styles", model.num_styles()},
                      {"config", model.config().to_json()}};
  save_checkpoint(dir / "weights.bin", model.params(), meta);
  atomic_write(dir / "config.json", model.config().to_json().dump(2) + "\n");
  vocab.save(dir / "vocab.txt");
  std::ostringstream lines;
  for (const auto& rec : log) lines << rec.to_json().dump() << '\n';
  atomic_write(dir / "train_log.jsonl", lines.str());
  if (head != nullptr) save_checkpoint(dir / "head.bin", head->params(), {{"kind", "style_head"}});
}

SmlmModel load_smlm(const std::filesystem::path& dir, const Vocabulary& vocab) {
  const auto meta = read_checkpoint_metadata(dir / "weights.bin");
  if (meta.value("kind", "") != "smlm") throw ParseError((dir / "weights.bin").string() + ": not an smlm checkpoint");
  if (meta.at("vocab_size").get<int>() != vocab.size()) throw ParseError("smlm checkpoint vocabulary size mismatch");
  SmlmModel model(SmlmConfig::from_json(meta.at("config")), vocab);
  load_checkpoint(dir / "weights.bin", model.params());
  return model;
}

StyleClassifierHead load_head(const std::filesystem::path& dir, const SmlmModel& model) {
  StyleClassifierHead head(model.config().embedding_dim, model.num_styles(), model.config().seed);
  load_checkpoint(dir / "head.bin", head.params());
  return head;
}

}  // namespace smlm::mlm
