#include "smlm/corpus.hpp"

#include "smlm/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace smlm {

namespace {

constexpr std::string_view kStyleSlot = "{STYLE}";
constexpr std::string_view kStyleIndexedPrefix = "{STYLE:";

bool is_slot(std::string_view tok) { return tok.size() >= 3 && tok.front() == '{' && tok.back() == '}'; }

bool is_style_slot(std::string_view tok) {
  return tok == kStyleSlot || tok.starts_with(kStyleIndexedPrefix);
}

void validate_tokens(const Tokens& tokens) {
  if (tokens.empty()) throw ParseError("empty sentence");
  for (const auto& t : tokens) {
    if (t.empty()) throw ParseError("empty token");
    if (t.find_first_of(" \t\r\n") != std::string::npos) throw ParseError("token contains whitespace: " + t);
  }
}

std::string split_file(Split s) { return std::string(split_name(s)) + ".tsv"; }

}  // namespace

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    case Split::kTest: return "test";
  }
  return "unknown";
}

Corpus::Corpus(std::vector<StyleLabel> labels) : labels_(std::move(labels)) {
  if (labels_.size() < 2) throw ConfigError("a corpus needs at least 2 style labels");
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i].id != static_cast<int>(i)) throw ConfigError("style label ids must be contiguous from 0");
  }
}

void Corpus::add(Split split, LabeledExample example) {
  if (example.label < 0 || example.label >= static_cast<int>(labels_.size())) {
    throw ParseError("unknown label id " + std::to_string(example.label));
  }
  validate_tokens(example.tokens);
  splits_[split].push_back(std::move(example));
}

std::size_t Corpus::size() const {
  std::size_t n = 0;
  for (const auto& [_, v] : splits_) n += v.size();
  return n;
}

bool Corpus::has_references(Split s) const {
  const auto& v = split(s);
  return !v.empty() && std::all_of(v.begin(), v.end(), [](const auto& e) { return e.reference.has_value(); });
}

std::vector<StyleLabel> make_labels(std::span<const std::string> names) {
  std::vector<StyleLabel> labels;
  for (std::size_t i = 0; i < names.size(); ++i) labels.push_back({static_cast<int>(i), names[i]});
  return labels;
}

Tokens split_tokens(std::string_view text) {
  Tokens out;
  if (text.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = text.find(' ', start);
    const auto piece = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    if (piece.empty()) throw ParseError("empty token (double or edge space)");
    out.emplace_back(piece);
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::vector<LabeledExample> parse_examples(std::istream& in, std::size_t num_labels, const std::string& source_name) {
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t line_no = 0;
  std::size_t pending_blank = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      ++pending_blank;
      continue;
    }
    if (pending_blank) throw ParseError(source_name, line_no - 1, "blank line inside data");
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw ParseError(source_name, line_no, "expected 2 tab-separated fields");
    }
    const std::string label_text = line.substr(0, tab);
    int label = -1;
    try {
      std::size_t used = 0;
      label = std::stoi(label_text, &used);
      if (used != label_text.size()) label = -1;
    } catch (const std::exception&) {
      label = -1;
    }
    if (label < 0) throw ParseError(source_name, line_no, "bad label '" + label_text + "'");
    if (static_cast<std::size_t>(label) >= num_labels) {
      throw ParseError(source_name, line_no, "unknown label id " + label_text);
    }
    const std::string_view text = std::string_view(line).substr(tab + 1);
    if (text.empty()) throw ParseError(source_name, line_no, "empty sentence");
    LabeledExample ex;
    try {
      ex.tokens = split_tokens(text);
    } catch (const ParseError& e) {
      throw ParseError(source_name, line_no, e.what());
    }
    ex.label = label;
    out.push_back(std::move(ex));
  }
  return out;
}

Corpus load_corpus(const std::filesystem::path& dir, std::span<const std::string> label_names) {
  Corpus corpus(make_labels(label_names));
  for (Split s : kAllSplits) {
    const auto path = dir / split_file(s);
    if (!std::filesystem::exists(path)) {
      if (s == Split::kTrain) throw ParseError("missing training split: " + path.string());
      continue;
    }
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    for (auto& ex : parse_examples(in, label_names.size(), path.string())) corpus.add(s, std::move(ex));
  }
  const auto ref_path = dir / "test.ref";
  if (std::filesystem::exists(ref_path)) {
    std::ifstream in(ref_path);
    std::vector<Tokens> refs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) throw ParseError(ref_path.string(), line_no, "empty reference");
      refs.push_back(split_tokens(line));
    }
    const auto& test = corpus.split(Split::kTest);
    if (refs.size() != test.size()) {
      throw ParseError(ref_path.string() + ": " + std::to_string(refs.size()) + " references for " +
                       std::to_string(test.size()) + " test examples");
    }
    Corpus with_refs(corpus.labels());
    for (Split s : kAllSplits) {
      const auto& v = corpus.split(s);
      for (std::size_t i = 0; i < v.size(); ++i) {
        LabeledExample ex = v[i];
        if (s == Split::kTest) ex.reference = refs[i];
        with_refs.add(s, std::move(ex));
      }
    }
    return with_refs;
  }
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (Split s : kAllSplits) {
    std::ofstream out(dir / split_file(s), std::ios::binary);
    for (const auto& ex : corpus.split(s)) out << ex.label << '\t' << join_tokens(ex.tokens) << '\n';
  }
  if (corpus.has_references(Split::kTest)) {
    std::ofstream out(dir / "test.ref", std::ios::binary);
    for (const auto& ex : corpus.split(Split::kTest)) out << join_tokens(*ex.reference) << '\n';
  }
}

// ---------------------------------------------------------------- vocabulary

void Vocabulary::push(std::string token) {
  const int id = static_cast<int>(tokens_.size());
  if (!ids_.emplace(token, id).second) throw ParseError("duplicate vocabulary token: " + token);
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::from_ordinary_tokens(std::size_t num_styles, std::span<const std::string> tokens) {
  Vocabulary v;
  v.num_styles_ = num_styles;
  v.push(std::string(kPadToken));
  v.push(std::string(kUnkToken));
  v.push(std::string(kMaskToken));
  for (std::size_t k = 0; k < num_styles; ++k) v.push("<src_" + std::to_string(k) + ">");
  for (std::size_t k = 0; k < num_styles; ++k) v.push("<dst_" + std::to_string(k) + ">");
  v.first_ordinary_ = v.size();
  for (const auto& t : tokens) v.push(t);
  return v;
}

Vocabulary Vocabulary::build(const Corpus& corpus, int min_freq) {
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
  std::unordered_map<std::string, int> counts;
  for (const auto& ex : corpus.split(Split::kTrain)) {
    for (const auto& t : ex.tokens) ++counts[t];
  }
  std::vector<std::pair<std::string, int>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_freq) kept.emplace_back(tok, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens;
  tokens.reserve(kept.size());
  for (auto& [tok, _] : kept) {
    if (tok.starts_with('<') && tok.ends_with('>')) continue;  // never shadow reserved markers
    tokens.push_back(tok);
  }
  return from_ordinary_tokens(corpus.num_styles(), tokens);
}

int Vocabulary::id(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("unknown token id " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::src_code(int label) const {
  if (label < 0 || static_cast<std::size_t>(label) >= num_styles_) throw std::out_of_range("bad style label");
  return 3 + label;
}

int Vocabulary::dst_code(int label) const {
  if (label < 0 || static_cast<std::size_t>(label) >= num_styles_) throw std::out_of_range("bad style label");
  return 3 + static_cast<int>(num_styles_) + label;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  out << "#smlm-vocab v1 styles=" << num_styles_ << '\n';
  for (int i = first_ordinary_; i < size(); ++i) out << tokens_[static_cast<std::size_t>(i)] << '\n';
  if (!out) throw Error("failed to write vocabulary " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open vocabulary " + path.string());
  std::string header;
  std::getline(in, header);
  constexpr std::string_view prefix = "#smlm-vocab v1 styles=";
  if (!std::string_view(header).starts_with(prefix)) throw ParseError(path.string(), 1, "bad vocabulary header");
  const std::size_t styles = std::stoul(header.substr(prefix.size()));
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return from_ordinary_tokens(styles, tokens);
}

std::vector<int> encode(std::span<const std::string> sentence, const Vocabulary& vocab) {
  if (sentence.empty()) throw std::invalid_argument("encode: empty sentence");
  std::vector<int> ids;
  ids.reserve(sentence.size());
  for (const auto& t : sentence) ids.push_back(vocab.id(t));
  return ids;
}

Tokens decode(std::span<const int> ids, const Vocabulary& vocab) {
  Tokens out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(vocab.token(id));
  return out;
}

// ---------------------------------------------------------------- toy corpus

void ToyCorpusSpec::validate() const {
  if (labels.size() < 2) throw ConfigError("labels: at least 2 style labels required");
  if (size_per_label <= 0) throw ConfigError("size_per_label: must be positive");
  if (dev_fraction < 0 || test_fraction < 0 || dev_fraction + test_fraction >= 1.0) {
    throw ConfigError("dev_fraction/test_fraction: must be non-negative and sum below 1");
  }
  if (templates.empty()) throw ConfigError("templates: at least one template required");

  std::map<std::string, std::string> owner;  // style token -> label
  std::size_t lexicon_size = 0;
  for (const auto& name : labels) {
    const auto it = lexicons.find(name);
    if (it == lexicons.end()) throw ConfigError("lexicons." + name + ": missing lexicon key");
    if (it->second.empty()) throw ConfigError("lexicons." + name + ": empty lexicon");
    if (lexicon_size == 0) lexicon_size = it->second.size();
    lexicon_size = std::min(lexicon_size, it->second.size());
    for (const auto& tok : it->second) {
      if (is_slot(tok) || tok.empty()) throw ConfigError("lexicons." + name + ": invalid token '" + tok + "'");
      const auto [pos, fresh] = owner.emplace(tok, name);
      if (!fresh && pos->second != name) {
        throw ConfigError("lexicons." + name + ": token '" + tok + "' also in lexicon of " + pos->second);
      }
    }
  }
  for (const auto& [key, _] : lexicons) {
    if (std::find(labels.begin(), labels.end(), key) == labels.end()) {
      throw ConfigError("lexicons." + key + ": not a declared label");
    }
  }
  for (const auto& [name, fillers] : slots) {
    if (fillers.empty()) throw ConfigError("slots." + name + ": empty filler list");
    for (const auto& f : fillers) {
      if (owner.count(f)) throw ConfigError("slots." + name + ": filler '" + f + "' is a style token");
    }
  }
  for (std::size_t t = 0; t < templates.size(); ++t) {
    const auto& tpl = templates[t];
    const std::string where = "templates[" + std::to_string(t) + "]";
    int style_slots = 0;
    for (const auto& tok : tpl) {
      if (is_style_slot(tok)) {
        ++style_slots;
        if (tok != kStyleSlot) {
          const std::string index_text = tok.substr(kStyleIndexedPrefix.size(), tok.size() - kStyleIndexedPrefix.size() - 1);
          std::size_t k = 0;
          try {
            k = std::stoul(index_text);
          } catch (const std::exception&) {
            throw ConfigError(where + ": bad style slot " + tok);
          }
          if (k >= lexicon_size) throw ConfigError(where + ": style index " + index_text + " exceeds lexicon size");
        }
      } else if (is_slot(tok)) {
        const std::string name = tok.substr(1, tok.size() - 2);
        if (!slots.count(name)) throw ConfigError(where + ": undefined slot '" + name + "'");
      } else {
        if (tok.empty() || tok.find_first_of(" \t") != std::string::npos) throw ConfigError(where + ": bad token");
        if (owner.count(tok)) throw ConfigError(where + ": literal '" + tok + "' is a style token");
      }
    }
    if (style_slots < 1 || style_slots > 3) throw ConfigError(where + ": needs 1 to 3 style slots");
  }
}

ToyCorpusSpec ToyCorpusSpec::from_json(const nlohmann::json& doc) {
  auto require = [&](const char* key) -> const nlohmann::json& {
    if (!doc.contains(key)) throw ConfigError(std::string(key) + ": missing key");
    return doc.at(key);
  };
  ToyCorpusSpec spec;
  try {
    spec.seed = doc.value("seed", spec.seed);
    spec.size_per_label = doc.value("size_per_label", spec.size_per_label);
    spec.dev_fraction = doc.value("dev_fraction", spec.dev_fraction);
    spec.test_fraction = doc.value("test_fraction", spec.test_fraction);
    spec.labels = require("labels").get<std::vector<std::string>>();
    spec.templates = require("templates").get<std::vector<Tokens>>();
    spec.lexicons = require("lexicons").get<std::map<std::string, Tokens>>();
    if (doc.contains("slots")) spec.slots = doc.at("slots").get<std::map<std::string, Tokens>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("toy spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

ToyCorpusSpec ToyCorpusSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open toy spec " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(doc);
}

ToyCorpus generate_toy_corpus(const ToyCorpusSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const bool binary = spec.labels.size() == 2;

  struct Draft {
    LabeledExample example;
    std::vector<std::size_t> planted;
  };

  auto uniform = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

  std::map<Split, std::vector<Draft>> drafts;
  for (std::size_t label = 0; label < spec.labels.size(); ++label) {
    const Tokens& lexicon = spec.lexicons.at(spec.labels[label]);
    const Tokens* other = binary ? &spec.lexicons.at(spec.labels[1 - label]) : nullptr;
    std::vector<Draft> per_label;
    per_label.reserve(static_cast<std::size_t>(spec.size_per_label));
    for (int i = 0; i < spec.size_per_label; ++i) {
      const Tokens& tpl = spec.templates[uniform(spec.templates.size())];
      Draft d;
      d.example.label = static_cast<int>(label);
      Tokens counterpart;
      for (const auto& tok : tpl) {
        if (is_style_slot(tok)) {
          std::size_t k = 0;
          if (tok == kStyleSlot) {
            k = uniform(other ? std::min(lexicon.size(), other->size()) : lexicon.size());
          } else {
            k = std::stoul(tok.substr(kStyleIndexedPrefix.size()));
          }
          d.planted.push_back(d.example.tokens.size());
          d.example.tokens.push_back(lexicon[k]);
          if (other) counterpart.push_back((*other)[k]);
        } else if (is_slot(tok)) {
          const Tokens& fillers = spec.slots.at(tok.substr(1, tok.size() - 2));
          d.example.tokens.push_back(fillers[uniform(fillers.size())]);
          counterpart.push_back(d.example.tokens.back());
        } else {
          d.example.tokens.push_back(tok);
          counterpart.push_back(tok);
        }
      }
      if (other) d.example.reference = std::move(counterpart);
      per_label.push_back(std::move(d));
    }
    const auto n = static_cast<std::size_t>(spec.size_per_label);
    const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.test_fraction));
    const auto n_dev = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.dev_fraction));
    const std::size_t n_train = n - n_test - n_dev;
    for (std::size_t i = 0; i < n; ++i) {
      const Split s = i < n_train ? Split::kTrain : (i < n_train + n_dev ? Split::kDev : Split::kTest);
      drafts[s].push_back(std::move(per_label[i]));
    }
  }

  ToyCorpus toy{Corpus(make_labels(spec.labels)), {}};
  for (Split s : kAllSplits) {
    auto& v = drafts[s];
    std::shuffle(v.begin(), v.end(), rng);
    auto& planted = toy.planted[s];
    for (auto& d : v) {
      if (s != Split::kTest) d.example.reference.reset();
      toy.corpus.add(s, std::move(d.example));
      planted.push_back(std::move(d.planted));
    }
  }
  return toy;
}

void save_planted(const ToyCorpus& toy, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  for (Split s : kAllSplits) {
    const auto& planted = toy.planted.at(s);
    for (std::size_t i = 0; i < planted.size(); ++i) {
      out << split_name(s) << '\t' << i << '\t';
      for (std::size_t k = 0; k < planted[i].size(); ++k) out << (k ? "," : "") << planted[i][k];
      out << '\n';
    }
  }
}

std::map<Split, PlantedPositions> load_planted(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::map<Split, PlantedPositions> out{{Split::kTrain, {}}, {Split::kDev, {}}, {Split::kTest, {}}};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string split, index, positions;
    std::getline(fields, split, '\t');
    std::getline(fields, index, '\t');
    std::getline(fields, positions, '\t');
    Split s;
    if (split == "train") s = Split::kTrain;
    else if (split == "dev") s = Split::kDev;
    else if (split == "test") s = Split::kTest;
    else throw ParseError(path.string(), line_no, "bad split name");
    std::vector<std::size_t> pos;
    std::istringstream items(positions);
    std::string item;
    while (std::getline(items, item, ',')) pos.push_back(std::stoul(item));
    out[s].push_back(std::move(pos));
  }
  return out;
}

}  // namespace smlm
