#include "smlm/masking.hpp"

#include "smlm/error.hpp"

#include <fstream>
#include <sstream>

namespace smlm::masking {

void MaskPolicyConfig::validate() const {
  if (!(lambda_epsilon >= 0.0 && lambda_epsilon <= 1.0)) {
    throw ConfigError("lambda_epsilon must lie in [0, 1]");
  }
}

double compute_baseline(std::size_t n, double lambda_epsilon) {
  if (n == 0) throw std::invalid_argument("compute_baseline: empty sentence");
  return (1.0 + lambda_epsilon) / static_cast<double>(n);
}

void AttributionBatch::append(std::span<const double> sentence_scores) {
  scores.insert(scores.end(), sentence_scores.begin(), sentence_scores.end());
  offsets.push_back(scores.size());
}

Mask attention_surplus_mask(std::span<const double> scores, double lambda_epsilon) {
  const double baseline = compute_baseline(scores.size(), lambda_epsilon);
  Mask mask(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) mask[i] = scores[i] >= baseline ? 1 : 0;
  return mask;
}

Mask attention_surplus_mask_batch(const AttributionBatch& batch, double lambda_epsilon) {
  Mask mask(batch.total_tokens());
  const double* a = batch.scores.data();
  std::uint8_t* m = mask.data();
  for (std::size_t s = 0; s < batch.sentences(); ++s) {
    const std::size_t begin = batch.offsets[s];
    const std::size_t end = batch.offsets[s + 1];
    const double baseline = compute_baseline(end - begin, lambda_epsilon);
    for (std::size_t i = begin; i < end; ++i) m[i] = a[i] >= baseline ? 1 : 0;
  }
  return mask;
}

Mask StyleMaskedSentence::mask() const {
  Mask m(tokens.size(), 0);
  for (auto p : mask_positions) m[p] = 1;
  return m;
}

StyleMaskedSentence apply_mask(const LabeledExample& example, std::span<const std::uint8_t> mask) {
  if (mask.size() != example.tokens.size()) {
    throw std::invalid_argument("apply_mask: mask length " + std::to_string(mask.size()) + " != sentence length " +
                                std::to_string(example.tokens.size()));
  }
  StyleMaskedSentence out;
  out.tokens = example.tokens;
  out.source_style = example.label;
  out.original = example;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      out.tokens[i] = std::string(Vocabulary::kMaskToken);
      out.mask_positions.push_back(i);
    }
  }
  return out;
}

Attributor make_attributor(const attribution::DiversityLstm& model, attribution::AttributionMethod method) {
  method.validate();
  return [&model, method](std::span<const int> ids) { return attribution::attribute(method, model, ids); };
}

std::vector<StyleMaskedSentence> mask_examples(std::span<const LabeledExample> examples, const Vocabulary& vocab,
                                               const Attributor& attributor, double lambda_epsilon) {
  MaskPolicyConfig{lambda_epsilon}.validate();
  AttributionBatch batch;
  batch.scores.reserve(examples.size() * 16);
  for (const auto& ex : examples) {
    const auto attr = attributor(encode(ex.tokens, vocab));
    if (attr.scores.size() != ex.tokens.size()) throw Error("attribution length does not match sentence length");
    batch.append(attr.scores);
  }
  const Mask flat = attention_surplus_mask_batch(batch, lambda_epsilon);
  std::vector<StyleMaskedSentence> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto begin = static_cast<std::ptrdiff_t>(batch.offsets[i]);
    const auto end = static_cast<std::ptrdiff_t>(batch.offsets[i + 1]);
    out.push_back(apply_mask(examples[i], std::span<const std::uint8_t>(flat.data() + begin, flat.data() + end)));
  }
  return out;
}

std::vector<StyleMaskedSentence> mask_corpus(const Corpus& corpus, Split split, const Vocabulary& vocab,
                                             const Attributor& attributor, double lambda_epsilon) {
  return mask_examples(corpus.split(split), vocab, attributor, lambda_epsilon);
}

void save_masked(std::span<const StyleMaskedSentence> masked, const std::filesystem::path& path) {
  std::ostringstream out;
  for (const auto& m : masked) {
    out << m.source_style << '\t' << join_tokens(m.tokens) << '\t';
    for (std::size_t k = 0; k < m.mask_positions.size(); ++k) out << (k ? "," : "") << m.mask_positions[k];
    out << '\n';
  }
  std::ofstream f(path, std::ios::binary);
  f << out.str();
  if (!f) throw Error("failed to write " + path.string());
}

std::vector<StyleMaskedSentence> load_masked(const std::filesystem::path& path,
                                             std::span<const LabeledExample> originals) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<StyleMaskedSentence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no > originals.size()) throw ParseError(path.string(), line_no, "more masked lines than examples");
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1) {
      fields.push_back(line.substr(start, tab - start));
    }
    fields.push_back(line.substr(start));
    if (fields.size() != 3) throw ParseError(path.string(), line_no, "expected 3 tab-separated fields");
    StyleMaskedSentence m;
    m.source_style = std::stoi(fields[0]);
    m.tokens = split_tokens(fields[1]);
    std::istringstream items(fields[2]);
    std::string item;
    while (std::getline(items, item, ',')) m.mask_positions.push_back(std::stoul(item));
    m.original = originals[line_no - 1];
    if (m.tokens.size() != m.original.tokens.size() || m.source_style != m.original.label) {
      throw ParseError(path.string(), line_no, "masked line does not align with its source example");
    }
    out.push_back(std::move(m));
  }
  if (out.size() != originals.size()) throw ParseError(path.string() + ": fewer masked lines than examples");
  return out;
}

}  // namespace smlm::masking
