#include "smlm/corpus.hpp"
#include "smlm/error.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace {

using namespace smlm;
namespace fs = std::filesystem;

ToyCorpusSpec small_spec() {
  ToyCorpusSpec spec;
  spec.seed = 5;
  spec.size_per_label = 50;
  spec.labels = {"negative", "positive"};
  spec.templates = {{"the", "{FOOD}", "was", "{STYLE}"}, {"a", "{STYLE:1}", "{FOOD}", "place"}};
  spec.lexicons = {{"negative", {"bad", "awful"}}, {"positive", {"good", "great"}}};
  spec.slots = {{"FOOD", {"pizza", "soup", "tea"}}};
  return spec;
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("smlm_corpus_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TEST(Tokens, SplitAndJoinRoundTrip) {
  const auto toks = split_tokens("the food was great");
  ASSERT_EQ(toks.size(), 4u);
  EXPECT_EQ(join_tokens(toks), "the food was great");
  EXPECT_THROW(split_tokens("double  space"), ParseError);
  EXPECT_THROW(split_tokens(" leading"), ParseError);
}

TEST(ParseExamples, ReportsLineNumbers) {
  std::istringstream ok("0\tthe food was bad\n1\tthe food was good\n\n");
  const auto examples = parse_examples(ok, 2, "ok.tsv");
  ASSERT_EQ(examples.size(), 2u);
  EXPECT_EQ(examples[1].label, 1);
  EXPECT_EQ(examples[1].tokens.back(), "good");

  std::istringstream bad_label("0\tfine\n7\tunknown label\n");
  try {
    parse_examples(bad_label, 2, "bad.tsv");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  std::istringstream no_tab("0 missing tab\n");
  EXPECT_THROW(parse_examples(no_tab, 2, "x.tsv"), ParseError);
  std::istringstream inner_blank("0\ta\n\n1\tb\n");
  EXPECT_THROW(parse_examples(inner_blank, 2, "x.tsv"), ParseError);
}

TEST(CorpusTest, RejectsUnknownLabels) {
  const std::string names[] = {"a", "b"};
  Corpus corpus(make_labels(names));
  EXPECT_THROW(corpus.add(Split::kTrain, {{"x"}, 2, std::nullopt}), ParseError);
  corpus.add(Split::kTrain, {{"x"}, 1, std::nullopt});
  EXPECT_EQ(corpus.size(), 1u);
  const std::string one[] = {"only"};
  EXPECT_THROW(Corpus(make_labels(one)), ConfigError);
}

TEST(VocabularyTest, ReservedBlockThenFrequencyOrder) {
  const std::string names[] = {"a", "b"};
  Corpus corpus(make_labels(names));
  corpus.add(Split::kTrain, {{"z", "y", "y", "x"}, 0, std::nullopt});
  corpus.add(Split::kTrain, {{"y", "x", "w"}, 1, std::nullopt});
  corpus.add(Split::kTest, {{"never", "seen"}, 1, std::nullopt});

  const auto vocab = Vocabulary::build(corpus, 1);
  EXPECT_EQ(vocab.token(Vocabulary::kPad), "<pad>");
  EXPECT_EQ(vocab.token(Vocabulary::kUnk), "<unk>");
  EXPECT_EQ(vocab.token(Vocabulary::kMask), "<mask>");
  EXPECT_EQ(vocab.token(vocab.src_code(1)), "<src_1>");
  EXPECT_EQ(vocab.token(vocab.dst_code(0)), "<dst_0>");
  EXPECT_EQ(vocab.first_ordinary_id(), 7);
  const Tokens expected{"y", "x", "w", "z"};
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_EQ(vocab.token(vocab.first_ordinary_id() + static_cast<int>(i)), expected[i]);
  }
  EXPECT_EQ(vocab.id("never"), Vocabulary::kUnk);

  const auto pruned = Vocabulary::build(corpus, 2);
  EXPECT_EQ(pruned.size(), 7 + 2);
  EXPECT_THROW(Vocabulary::build(corpus, 0), ConfigError);
}

TEST(VocabularyTest, SaveLoadRoundTrip) {
  const Tokens words{"alpha", "beta"};
  const auto vocab = Vocabulary::from_ordinary_tokens(3, words);
  const auto dir = scratch_dir("vocab");
  vocab.save(dir / "vocab.txt");
  EXPECT_EQ(Vocabulary::load(dir / "vocab.txt"), vocab);
  const Tokens sentence{"beta", "gamma"};
  const auto ids = encode(sentence, vocab);
  EXPECT_EQ(ids[1], Vocabulary::kUnk);
  EXPECT_EQ(decode(ids, vocab), (Tokens{"beta", "<unk>"}));
}

TEST(CorpusIo, SaveLoadKeepsSplitsAndReferences) {
  auto toy = generate_toy_corpus(small_spec());
  const auto dir = scratch_dir("io");
  save_corpus(toy.corpus, dir);
  const std::string names[] = {"negative", "positive"};
  const auto loaded = load_corpus(dir, names);
  for (Split s : kAllSplits) {
    ASSERT_EQ(loaded.split(s).size(), toy.corpus.split(s).size()) << split_name(s);
    for (std::size_t i = 0; i < loaded.split(s).size(); ++i) {
      EXPECT_EQ(loaded.split(s)[i].tokens, toy.corpus.split(s)[i].tokens);
      EXPECT_EQ(loaded.split(s)[i].label, toy.corpus.split(s)[i].label);
    }
  }
  EXPECT_TRUE(loaded.has_references(Split::kTest));
  EXPECT_THROW(load_corpus(dir / "missing", names), ParseError);
}

TEST(ToyCorpus, PlantedPositionsHoldStyleTokens) {
  const auto spec = small_spec();
  const auto toy = generate_toy_corpus(spec);
  EXPECT_EQ(toy.corpus.size(), 100u);
  for (Split s : kAllSplits) {
    const auto& examples = toy.corpus.split(s);
    const auto& planted = toy.planted.at(s);
    ASSERT_EQ(planted.size(), examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto& lexicon = spec.lexicons.at(spec.labels[static_cast<std::size_t>(examples[i].label)]);
      const std::set<std::string> style(lexicon.begin(), lexicon.end());
      ASSERT_EQ(planted[i].size(), 1u);
      for (std::size_t t = 0; t < examples[i].tokens.size(); ++t) {
        const bool is_planted = t == planted[i][0];
        EXPECT_EQ(style.count(examples[i].tokens[t]) == 1, is_planted);
      }
    }
  }
}

TEST(ToyCorpus, FixedLexiconIndexAndCounterpartReference) {
  const auto spec = small_spec();
  const auto toy = generate_toy_corpus(spec);
  for (const auto& ex : toy.corpus.split(Split::kTest)) {
    ASSERT_TRUE(ex.reference.has_value());
    ASSERT_EQ(ex.reference->size(), ex.tokens.size());
    if (ex.tokens[0] == "a") {
      const auto& own = spec.lexicons.at(spec.labels[static_cast<std::size_t>(ex.label)]);
      const auto& other = spec.lexicons.at(spec.labels[static_cast<std::size_t>(1 - ex.label)]);
      EXPECT_EQ(ex.tokens[1], own[1]);
      EXPECT_EQ((*ex.reference)[1], other[1]);
    }
  }
}

TEST(ToyCorpus, SeedDeterminesOutput) {
  auto spec = small_spec();
  const auto a = generate_toy_corpus(spec);
  const auto b = generate_toy_corpus(spec);
  spec.seed = 6;
  const auto c = generate_toy_corpus(spec);
  auto train_tokens = [](const ToyCorpus& t) {
    std::vector<Tokens> out;
    for (const auto& ex : t.corpus.split(Split::kTrain)) out.push_back(ex.tokens);
    return out;
  };
  EXPECT_EQ(train_tokens(a), train_tokens(b));
  EXPECT_NE(train_tokens(a), train_tokens(c));
}

TEST(ToyCorpus, SpecValidationNamesTheKey) {
  auto spec = small_spec();
  spec.lexicons["positive"].push_back("bad");
  try {
    spec.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("lexicons.positive"), std::string::npos);
  }
  spec = small_spec();
  spec.templates.push_back({"no", "style", "here"});
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = small_spec();
  spec.templates.push_back({"{STYLE:9}"});
  EXPECT_THROW(spec.validate(), ConfigError);
  EXPECT_THROW(ToyCorpusSpec::from_json(nlohmann::json{{"labels", {"a", "b"}}}), ConfigError);
}

TEST(ToyCorpus, PlantedFileRoundTrip) {
  const auto toy = generate_toy_corpus(small_spec());
  const auto dir = scratch_dir("planted");
  save_planted(toy, dir / "planted.tsv");
  EXPECT_EQ(load_planted(dir / "planted.tsv"), toy.planted);
}

}  // namespace
