#include "smlm/eval.hpp"

#include "smlm/checkpoint.hpp"
#include "smlm/error.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace smlm::eval {

// ---------------------------------------------------------------- classifier

EvalClassifier::EvalClassifier(const EvalClassifierConfig& config, int vocab_size, int num_classes)
    : config_(config), vocab_size_(vocab_size), num_classes_(num_classes) {
  if (config.embedding_dim <= 0 || config.hidden_dim <= 0) throw ConfigError("eval classifier: dims must be positive");
  if (num_classes < 2) throw ConfigError("eval classifier: at least 2 classes required");
  nn::Rng rng(config.seed);
  embedding_ = params_.add("embedding", nn::normal_init(vocab_size, config.embedding_dim, 0.1, rng));
  forward_lstm_ = nn::Lstm(params_, "lstm.forward", config.embedding_dim, config.hidden_dim, rng);
  backward_lstm_ = nn::Lstm(params_, "lstm.backward", config.embedding_dim, config.hidden_dim, rng);
  output_ = nn::Linear(params_, "output", 2 * config.hidden_dim, num_classes, rng);
}

Matrix EvalClassifier::embed(std::span<const int> ids) const {
  if (ids.empty()) throw std::invalid_argument("eval classifier: empty sentence");
  Matrix out(static_cast<Eigen::Index>(ids.size()), config_.embedding_dim);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= vocab_size_) throw std::out_of_range("eval classifier: token id out of range");
    out.row(static_cast<Eigen::Index>(t)) = embedding_.value().row(ids[t]);
  }
  return out;
}

Var EvalClassifier::logits_from_embeddings(const Var& embeddings) const {
  const Var fwd = forward_lstm_(embeddings, false);
  const Var bwd = backward_lstm_(embeddings, true);
  const Var summary[] = {ad::slice_rows(fwd, fwd.rows() - 1, 1), ad::slice_rows(bwd, 0, 1)};
  return output_(ad::concat_cols(summary));
}

Var EvalClassifier::logits(std::span<const int> ids) const {
  return logits_from_embeddings(ad::gather_rows(embedding_, ids));
}

void EvalClassifier::save(const std::filesystem::path& path) const {
  nlohmann::json meta{{"kind", "eval_classifier"},
                      {"vocab_size", vocab_size_},
                      {"num_classes", num_classes_},
                      {"dev_accuracy", dev_accuracy},
                      {"config",
                       {{"embedding_dim", config_.embedding_dim},
                        {"hidden_dim", config_.hidden_dim},
                        {"epochs", config_.epochs},
                        {"learning_rate", config_.learning_rate},
                        {"batch_size", config_.batch_size},
                        {"seed", config_.seed}}}};
  save_checkpoint(path, params_, meta);
}

EvalClassifier EvalClassifier::load(const std::filesystem::path& path) {
  const auto meta = read_checkpoint_metadata(path);
  if (meta.value("kind", "") != "eval_classifier") throw ParseError(path.string() + ": not an eval classifier");
  const auto& c = meta.at("config");
  EvalClassifierConfig config;
  config.embedding_dim = c.at("embedding_dim");
  config.hidden_dim = c.at("hidden_dim");
  config.epochs = c.at("epochs");
  config.learning_rate = c.at("learning_rate");
  config.batch_size = c.at("batch_size");
  config.seed = c.at("seed");
  EvalClassifier clf(config, meta.at("vocab_size"), meta.at("num_classes"));
  load_checkpoint(path, clf.params_);
  clf.dev_accuracy = meta.at("dev_accuracy");
  return clf;
}

EvalClassifier train_eval_classifier(const Corpus& corpus, const Vocabulary& vocab,
                                     const EvalClassifierConfig& config) {
  if (config.epochs < 0 || config.batch_size < 1) throw ConfigError("eval classifier: bad epochs/batch size");
  const auto& train = corpus.split(Split::kTrain);
  if (train.empty()) throw ConfigError("eval classifier: empty train split");
  EvalClassifier clf(config, vocab.size(), static_cast<int>(corpus.num_styles()));
  std::vector<std::vector<int>> encoded;
  encoded.reserve(train.size());
  for (const auto& ex : train) encoded.push_back(encode(ex.tokens, vocab));

  nn::Adam optimizer(clf.params().vars(), {.learning_rate = config.learning_rate});
  nn::Rng rng(config.seed ^ 0xbf58476d1ce4e5b9ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      optimizer.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        const Var logits = clf.logits(encoded[idx]);
        const int label = train[idx].label;
        const Var loss = ad::nll_rows(ad::log_softmax_rows(logits), std::span<const int>(&label, 1));
        if (!std::isfinite(loss.scalar())) throw TrainingError("eval classifier: non-finite loss");
        total += loss.scalar();
        ad::backward(ad::scale(loss, inv_batch));
      }
      optimizer.step();
    }
    clf.dev_accuracy = attribution::accuracy(clf, corpus, vocab, Split::kDev);
    spdlog::info("eval classifier epoch {}: nll={:.4f} dev_acc={:.4f}", epoch,
                 total / static_cast<double>(order.size()), clf.dev_accuracy);
  }
  optimizer.zero_grad();
  return clf;
}

std::vector<int> encode_for_classifier(std::span<const std::string> tokens, const Vocabulary& vocab) {
  auto ids = encode(tokens, vocab);
  for (int& id : ids) {
    if (id == Vocabulary::kMask) id = Vocabulary::kUnk;
  }
  return ids;
}

std::vector<int> classify(const EvalClassifier& clf, std::span<const Tokens> sentences, const Vocabulary& vocab) {
  std::vector<int> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(clf.predict(encode_for_classifier(s, vocab)));
  return out;
}

double tst_percent(const EvalClassifier& clf, std::span<const Tokens> outputs, std::span<const int> targets,
                   const Vocabulary& vocab) {
  if (outputs.empty()) throw std::invalid_argument("tst_percent: empty input");
  if (outputs.size() != targets.size()) throw std::invalid_argument("tst_percent: outputs/targets length mismatch");
  const auto predicted = classify(clf, outputs, vocab);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == targets[i] ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(outputs.size());
}

// ------------------------------------------------------------------- BLEU

namespace {

using NgramCounts = std::unordered_map<std::string, int>;

NgramCounts count_ngrams(std::span<const std::string> tokens, int n) {
  NgramCounts counts;
  if (tokens.size() < static_cast<std::size_t>(n)) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
    std::string key;
    for (int k = 0; k < n; ++k) {
      if (k) key.push_back('\x1f');
      key += tokens[i + static_cast<std::size_t>(k)];
    }
    ++counts[key];
  }
  return counts;
}

std::size_t closest_ref_length(std::size_t cand_len, const std::vector<Tokens>& refs) {
  std::size_t best = refs.front().size();
  std::size_t best_diff = std::numeric_limits<std::size_t>::max();
  for (const auto& r : refs) {
    const std::size_t diff = r.size() > cand_len ? r.size() - cand_len : cand_len - r.size();
    if (diff < best_diff || (diff == best_diff && r.size() < best)) {
      best_diff = diff;
      best = r.size();
    }
  }
  return best;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double bleu(std::span<const Tokens> candidates, std::span<const std::vector<Tokens>> reference_sets, int max_n) {
  if (candidates.size() != reference_sets.size()) throw std::invalid_argument("bleu: candidate/reference count mismatch");
  if (candidates.empty()) throw std::invalid_argument("bleu: empty corpus");
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");
  std::vector<double> matches(static_cast<std::size_t>(max_n), 0.0), totals(static_cast<std::size_t>(max_n), 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& refs = reference_sets[i];
    if (refs.empty()) throw std::invalid_argument("bleu: candidate " + std::to_string(i) + " has no reference");
    cand_len += static_cast<double>(candidates[i].size());
    ref_len += static_cast<double>(closest_ref_length(candidates[i].size(), refs));
    for (int n = 1; n <= max_n; ++n) {
      const auto cand = count_ngrams(candidates[i], n);
      NgramCounts ref_max;
      for (const auto& r : refs) {
        for (const auto& [gram, c] : count_ngrams(r, n)) ref_max[gram] = std::max(ref_max[gram], c);
      }
      double hit = 0.0;
      for (const auto& [gram, c] : cand) {
        const auto it = ref_max.find(gram);
        if (it != ref_max.end()) hit += std::min(c, it->second);
      }
      matches[static_cast<std::size_t>(n - 1)] += hit;
      const auto len = candidates[i].size();
      totals[static_cast<std::size_t>(n - 1)] +=
          len >= static_cast<std::size_t>(n) ? static_cast<double>(len - static_cast<std::size_t>(n) + 1) : 0.0;
    }
  }
  double log_sum = 0.0;
  for (std::size_t k = 0; k < matches.size(); ++k) {
    if (matches[k] == 0.0 || totals[k] == 0.0) return 0.0;
    log_sum += std::log(matches[k] / totals[k]);
  }
  const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(max_n));
}

double bleu(std::span<const Tokens> candidates, std::span<const Tokens> references, int max_n) {
  if (candidates.size() != references.size()) throw std::invalid_argument("bleu: candidate/reference count mismatch");
  std::vector<std::vector<Tokens>> sets;
  sets.reserve(references.size());
  for (const auto& r : references) sets.push_back({r});
  return bleu(candidates, sets, max_n);
}

double rouge_l_sentence(std::span<const std::string> candidate, std::span<const std::string> reference) {
  constexpr double kBeta = 1.2;
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  const double prec = lcs / static_cast<double>(candidate.size());
  const double rec = lcs / static_cast<double>(reference.size());
  if (prec == 0.0 || rec == 0.0) return 0.0;
  return ((1.0 + kBeta * kBeta) * prec * rec) / (rec + kBeta * kBeta * prec);
}

double rouge_l(std::span<const Tokens> candidates, std::span<const Tokens> references) {
  if (candidates.size() != references.size()) throw std::invalid_argument("rouge_l: candidate/reference count mismatch");
  if (candidates.empty()) throw std::invalid_argument("rouge_l: empty corpus");
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) total += rouge_l_sentence(candidates[i], references[i]);
  return total / static_cast<double>(candidates.size());
}

EvalReport evaluate_transfer(const EvalClassifier& clf, std::span<const Tokens> outputs,
                             std::span<const LabeledExample> sources, std::span<const int> targets,
                             const Vocabulary& vocab) {
  if (outputs.size() != sources.size()) throw std::invalid_argument("evaluate_transfer: outputs/sources mismatch");
  EvalReport report;
  report.n_examples = outputs.size();
  report.tst_percent = tst_percent(clf, outputs, targets, vocab);
  std::vector<Tokens> source_tokens;
  source_tokens.reserve(sources.size());
  for (const auto& s : sources) source_tokens.push_back(s.tokens);
  report.s_bleu = bleu(outputs, source_tokens);
  const bool has_refs =
      std::all_of(sources.begin(), sources.end(), [](const LabeledExample& e) { return e.reference.has_value(); });
  if (has_refs) {
    std::vector<Tokens> refs;
    refs.reserve(sources.size());
    for (const auto& s : sources) refs.push_back(*s.reference);
    report.r_bleu = bleu(outputs, refs);
    report.rouge_l = rouge_l(outputs, refs);
  } else {
    report.rouge_l = rouge_l(outputs, source_tokens);
  }
  report.mean2 = (report.tst_percent + report.s_bleu) / 2.0;
  return report;
}

// ---------------------------------------------------------- masking quality

const MaskQualityRow* MaskQualityReport::find(std::string_view method) const {
  for (const auto& r : rows) {
    if (r.method == method) return &r;
  }
  return nullptr;
}

namespace {

MaskQualityRow quality_row(const EvalClassifier& clf, std::span<const Tokens> masked_tokens,
                           std::span<const LabeledExample> sources, std::size_t masked_count, std::string method,
                           const Vocabulary& vocab) {
  if (masked_tokens.size() != sources.size()) throw std::invalid_argument("mask_quality: corpora are not aligned");
  if (sources.empty()) throw std::invalid_argument("mask_quality: empty corpus");
  MaskQualityRow row;
  row.method = std::move(method);
  row.n_examples = sources.size();
  std::vector<Tokens> source_tokens;
  source_tokens.reserve(sources.size());
  std::size_t total_tokens = 0;
  for (const auto& s : sources) {
    source_tokens.push_back(s.tokens);
    total_tokens += s.tokens.size();
  }
  const auto predicted = classify(clf, masked_tokens, vocab);
  const auto reference = classify(clf, source_tokens, vocab);
  std::size_t correct = 0, consistent = 0;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    correct += predicted[i] == sources[i].label ? 1 : 0;
    consistent += predicted[i] == reference[i] ? 1 : 0;
  }
  const double n = static_cast<double>(sources.size());
  row.acc_percent = 100.0 * static_cast<double>(correct) / n;
  row.acc_consistent_percent = 100.0 * static_cast<double>(consistent) / n;
  row.s_bleu_masked = bleu(masked_tokens, source_tokens);
  row.mask_rate = static_cast<double>(masked_count) / static_cast<double>(total_tokens);
  return row;
}

}  // namespace

MaskQualityRow mask_quality(const EvalClassifier& clf, std::span<const masking::StyleMaskedSentence> masked,
                            std::span<const LabeledExample> sources, std::string method, const Vocabulary& vocab) {
  std::vector<Tokens> tokens;
  tokens.reserve(masked.size());
  std::size_t masked_count = 0;
  for (const auto& m : masked) {
    tokens.push_back(m.tokens);
    masked_count += m.mask_positions.size();
  }
  return quality_row(clf, tokens, sources, masked_count, std::move(method), vocab);
}

MaskQualityRow no_masking_row(const EvalClassifier& clf, std::span<const LabeledExample> sources,
                              const Vocabulary& vocab) {
  std::vector<Tokens> tokens;
  tokens.reserve(sources.size());
  for (const auto& s : sources) tokens.push_back(s.tokens);
  return quality_row(clf, tokens, sources, 0, std::string(kNoMaskingRow), vocab);
}

SweepCurve lambda_sweep(const EvalClassifier& clf, std::span<const LabeledExample> examples,
                        const Vocabulary& vocab, const masking::Attributor& attributor,
                        std::span<const double> grid, std::string method) {
  if (grid.empty()) throw ConfigError("sweep: empty grid");
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (grid[k] < 0.0 || grid[k] > 1.0) throw ConfigError("sweep: grid values must lie in [0, 1]");
    if (k > 0 && !(grid[k] > grid[k - 1])) throw ConfigError("sweep: grid must be strictly increasing");
  }
  masking::AttributionBatch batch;
  for (const auto& ex : examples) batch.append(attributor(encode(ex.tokens, vocab)).scores);

  SweepCurve curve;
  curve.method = std::move(method);
  for (double lambda : grid) {
    const auto flat = masking::attention_surplus_mask_batch(batch, lambda);
    std::vector<masking::StyleMaskedSentence> masked;
    masked.reserve(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto begin = static_cast<std::ptrdiff_t>(batch.offsets[i]);
      const auto end = static_cast<std::ptrdiff_t>(batch.offsets[i + 1]);
      masked.push_back(
          masking::apply_mask(examples[i], std::span<const std::uint8_t>(flat.data() + begin, flat.data() + end)));
    }
    const auto row = mask_quality(clf, masked, examples, curve.method, vocab);
    curve.points.push_back({lambda, row.acc_percent, row.s_bleu_masked, row.mask_rate});
  }
  return curve;
}

MaskingF1 masking_f1(std::span<const masking::StyleMaskedSentence> masked,
                     std::span<const std::vector<std::size_t>> planted) {
  if (masked.size() != planted.size()) throw std::invalid_argument("masking_f1: corpora are not aligned");
  std::size_t tp = 0, predicted = 0, actual = 0;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    const auto mask = masked[i].mask();
    for (std::size_t p : planted[i]) {
      if (p >= mask.size()) throw std::out_of_range("masking_f1: planted position beyond sentence end");
      tp += mask[p] ? 1 : 0;
    }
    predicted += masked[i].mask_positions.size();
    actual += planted[i].size();
  }
  MaskingF1 out;
  out.precision = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
  out.recall = actual ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
  out.f1 = out.precision + out.recall > 0.0 ? 2.0 * out.precision * out.recall / (out.precision + out.recall) : 0.0;
  return out;
}

// ----------------------------------------------------------------- reports

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json metrics = nlohmann::json::array();
  auto add = [&](const char* name, double value) { metrics.push_back({{"metric", name}, {"value", value}}); };
  add("tst_percent", report.tst_percent);
  add("s_bleu", report.s_bleu);
  if (report.r_bleu) add("r_bleu", *report.r_bleu);
  add("rouge_l", report.rouge_l);
  add("mean2", report.mean2);
  return {{"n_examples", report.n_examples}, {"metrics", metrics}};
}

EvalReport eval_report_from_json(const nlohmann::json& doc) {
  EvalReport report;
  report.n_examples = doc.at("n_examples");
  for (const auto& m : doc.at("metrics")) {
    const std::string name = m.at("metric");
    const double value = m.at("value");
    if (name == "tst_percent") report.tst_percent = value;
    else if (name == "s_bleu") report.s_bleu = value;
    else if (name == "r_bleu") report.r_bleu = value;
    else if (name == "rouge_l") report.rouge_l = value;
    else if (name == "mean2") report.mean2 = value;
    else throw ParseError("eval report: unknown metric '" + name + "'");
  }
  return report;
}

nlohmann::json to_json(const MaskQualityReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"method", r.method},
                    {"acc_percent", r.acc_percent},
                    {"acc_consistent_percent", r.acc_consistent_percent},
                    {"s_bleu_masked", r.s_bleu_masked},
                    {"mask_rate", r.mask_rate},
                    {"n_examples", r.n_examples}});
  }
  return {{"baseline_acc_percent", report.baseline_acc_percent}, {"rows", rows}};
}

MaskQualityReport mask_quality_from_json(const nlohmann::json& doc) {
  MaskQualityReport report;
  report.baseline_acc_percent = doc.at("baseline_acc_percent");
  for (const auto& r : doc.at("rows")) {
    report.rows.push_back({r.at("method"), r.at("acc_percent"), r.at("acc_consistent_percent"),
                           r.at("s_bleu_masked"), r.at("mask_rate"), r.at("n_examples")});
  }
  return report;
}

nlohmann::json to_json(const SweepCurve& curve) {
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : curve.points) {
    points.push_back({{"lambda_epsilon", p.lambda_epsilon},
                      {"acc_percent", p.acc_percent},
                      {"s_bleu_masked", p.s_bleu_masked},
                      {"mask_rate", p.mask_rate}});
  }
  return {{"method", curve.method}, {"points", points}};
}

SweepCurve sweep_curve_from_json(const nlohmann::json& doc) {
  SweepCurve curve;
  curve.method = doc.at("method");
  for (const auto& p : doc.at("points")) {
    curve.points.push_back({p.at("lambda_epsilon"), p.at("acc_percent"), p.at("s_bleu_masked"), p.at("mask_rate")});
  }
  return curve;
}

nlohmann::json to_json(const MaskingF1& f1) {
  return {{"precision", f1.precision}, {"recall", f1.recall}, {"f1", f1.f1}};
}

std::string format_table(const EvalReport& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << std::left << std::setw(10) << "TST%" << std::setw(10) << "s-BLEU" << std::setw(10) << "r-BLEU"
      << std::setw(10) << "ROUGE-L" << std::setw(10) << "Mean-2" << "n\n";
  out << std::setw(10) << report.tst_percent << std::setw(10) << report.s_bleu;
  if (report.r_bleu) {
    out << std::setw(10) << *report.r_bleu;
  } else {
    out << std::setw(10) << "-";
  }
  out << std::setw(10) << report.rouge_l << std::setw(10) << report.mean2 << report.n_examples << '\n';
  return out.str();
}

std::string format_table(const MaskQualityReport& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << std::left;
  out << std::setw(12) << "Method" << std::setw(10) << "Acc%" << std::setw(14) << "Acc%(rel)" << std::setw(10)
      << "s-BLEU" << "mask rate\n";
  for (const auto& r : report.rows) {
    out << std::setw(12) << r.method << std::setw(10) << r.acc_percent << std::setw(14) << r.acc_consistent_percent
        << std::setw(10) << r.s_bleu_masked << std::setprecision(4) << r.mask_rate << std::setprecision(2) << '\n';
  }
  out << "unmasked accuracy vs. true labels: " << report.baseline_acc_percent << "%\n";
  return out.str();
}

std::string format_table(const SweepCurve& curve) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << std::left;
  out << "lambda_epsilon sweep (" << curve.method << ")\n";
  out << std::setw(10) << "lambda" << std::setw(10) << "Acc%" << std::setw(10) << "s-BLEU" << "mask rate\n";
  for (const auto& p : curve.points) {
    out << std::setw(10) << p.lambda_epsilon << std::setw(10) << p.acc_percent << std::setw(10) << p.s_bleu_masked
        << std::setprecision(4) << p.mask_rate << std::setprecision(2) << '\n';
  }
  return out.str();
}

std::string sweep_csv(const SweepCurve& curve) {
  std::ostringstream out;
  out << std::setprecision(10);
  out << "lambda_epsilon,acc_percent,s_bleu_masked,mask_rate\n";
  for (const auto& p : curve.points) {
    out << p.lambda_epsilon << ',' << p.acc_percent << ',' << p.s_bleu_masked << ',' << p.mask_rate << '\n';
  }
  return out.str();
}

}  // namespace smlm::eval
