#pragma once

// Style-labelled corpora: data model, TSV ingestion, vocabulary, and the
// planted-style toy corpus generator.

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace smlm {

using Tokens = std::vector<std::string>;

struct StyleLabel {
  int id = 0;
  std::string name;

  friend bool operator==(const StyleLabel&, const StyleLabel&) = default;
};

struct LabeledExample {
  Tokens tokens;
  int label = 0;
  std::optional<Tokens> reference;
};

enum class Split { kTrain, kDev, kTest };
inline constexpr std::array<Split, 3> kAllSplits{Split::kTrain, Split::kDev, Split::kTest};
std::string_view split_name(Split split);

class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<StyleLabel> labels);

  // Validates label ids and token shape before accepting the example.
  void add(Split split, LabeledExample example);

  const std::vector<LabeledExample>& split(Split s) const { return splits_.at(s); }
  const std::vector<StyleLabel>& labels() const { return labels_; }
  std::size_t num_styles() const { return labels_.size(); }
  std::size_t size() const;
  bool has_references(Split s) const;

 private:
  std::vector<StyleLabel> labels_;
  std::map<Split, std::vector<LabeledExample>> splits_{
      {Split::kTrain, {}}, {Split::kDev, {}}, {Split::kTest, {}}};
};

std::vector<StyleLabel> make_labels(std::span<const std::string> names);

// Splits on single spaces; rejects empty tokens.
Tokens split_tokens(std::string_view text);
std::string join_tokens(std::span<const std::string> tokens);

// Parses "<label-id>\t<tokens>" lines. Blank trailing lines are ignored.
std::vector<LabeledExample> parse_examples(std::istream& in, std::size_t num_labels,
                                           const std::string& source_name);

// Reads train.tsv (required), dev.tsv and test.tsv (optional) and an
// optional test.ref holding one reference per test line.
Corpus load_corpus(const std::filesystem::path& dir, std::span<const std::string> label_names);
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kMask = 2;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";
  static constexpr std::string_view kMaskToken = "<mask>";

  Vocabulary() = default;

  // Train-split tokens with frequency >= min_freq, ordered by frequency
  // (descending) then lexicographically, after the reserved block.
  static Vocabulary build(const Corpus& corpus, int min_freq);
  static Vocabulary from_ordinary_tokens(std::size_t num_styles, std::span<const std::string> tokens);

  int id(std::string_view token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  std::size_t num_styles() const { return num_styles_; }
  int src_code(int label) const;
  int dst_code(int label) const;
  bool is_reserved(int id) const { return id >= 0 && id < first_ordinary_; }
  int first_ordinary_id() const { return first_ordinary_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_ && a.num_styles_ == b.num_styles_;
  }

 private:
  void push(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::size_t num_styles_ = 0;
  int first_ordinary_ = 0;
};

std::vector<int> encode(std::span<const std::string> sentence, const Vocabulary& vocab);
Tokens decode(std::span<const int> ids, const Vocabulary& vocab);

// Templates are token skeletons. "{STYLE}" draws a random token from the
// example's style lexicon, "{STYLE:k}" takes lexicon entry k, and "{NAME}"
// draws from the content filler list `slots[NAME]`.
struct ToyCorpusSpec {
  std::uint64_t seed = 7;
  int size_per_label = 1000;
  double dev_fraction = 0.1;
  double test_fraction = 0.1;
  std::vector<std::string> labels;
  std::vector<Tokens> templates;
  std::map<std::string, Tokens> lexicons;  // keyed by label name
  std::map<std::string, Tokens> slots;

  // Throws ConfigError naming the offending key.
  void validate() const;
  static ToyCorpusSpec from_json(const nlohmann::json& doc);
  static ToyCorpusSpec load(const std::filesystem::path& path);
};

using PlantedPositions = std::vector<std::vector<std::size_t>>;

struct ToyCorpus {
  Corpus corpus;
  std::map<Split, PlantedPositions> planted;
};

// Binary-style specs also receive a counterpart reference for each test
// example: the same instantiation with the other label's lexicon.
ToyCorpus generate_toy_corpus(const ToyCorpusSpec& spec);

void save_planted(const ToyCorpus& toy, const std::filesystem::path& path);
std::map<Split, PlantedPositions> load_planted(const std::filesystem::path& path);

}  // namespace smlm
