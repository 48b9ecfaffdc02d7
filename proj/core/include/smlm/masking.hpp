#pragma once

// Attention-surplus style masking: a token is style-bearing when its
// attribution reaches (1 + lambda_epsilon) / n.

#include "smlm/attribution.hpp"
#include "smlm/corpus.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace smlm::masking {

using Mask = std::vector<std::uint8_t>;

struct MaskPolicyConfig {
  double lambda_epsilon = 0.15;

  void validate() const;
};

double compute_baseline(std::size_t n, double lambda_epsilon);

// Flattened attribution scores for a batch of sentences; sentence i owns
// scores[offsets[i], offsets[i + 1]).
struct AttributionBatch {
  std::vector<double> scores;
  std::vector<std::size_t> offsets{0};

  void append(std::span<const double> sentence_scores);
  std::size_t sentences() const { return offsets.size() - 1; }
  std::size_t total_tokens() const { return scores.size(); }
};

// mask[i] = A[i] >= (1 + lambda) / n.
Mask attention_surplus_mask(std::span<const double> scores, double lambda_epsilon);

// One threshold pass over the flattened batch: each token is compared once
// against its sentence's baseline. No sorting, no temporaries.
Mask attention_surplus_mask_batch(const AttributionBatch& batch, double lambda_epsilon);

struct StyleMaskedSentence {
  Tokens tokens;
  std::vector<std::size_t> mask_positions;
  int source_style = 0;
  LabeledExample original;

  Mask mask() const;
};

StyleMaskedSentence apply_mask(const LabeledExample& example, std::span<const std::uint8_t> mask);

using Attributor = std::function<attribution::AttributionVector(std::span<const int>)>;

Attributor make_attributor(const attribution::DiversityLstm& model, attribution::AttributionMethod method);

// Attributes every example, masks the whole batch in one vectorised pass and
// returns the masked sentences in input order.
std::vector<StyleMaskedSentence> mask_examples(std::span<const LabeledExample> examples, const Vocabulary& vocab,
                                               const Attributor& attributor, double lambda_epsilon);
std::vector<StyleMaskedSentence> mask_corpus(const Corpus& corpus, Split split, const Vocabulary& vocab,
                                             const Attributor& attributor, double lambda_epsilon);

// "label<TAB>masked tokens<TAB>comma-separated positions"
void save_masked(std::span<const StyleMaskedSentence> masked, const std::filesystem::path& path);
// Re-attaches originals by line; the file must align with `originals`.
std::vector<StyleMaskedSentence> load_masked(const std::filesystem::path& path,
                                             std::span<const LabeledExample> originals);

}  // namespace smlm::masking
