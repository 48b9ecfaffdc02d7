#include "smlm/error.hpp"
#include "smlm/eval.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

namespace {

using namespace smlm;

struct MetricCase {
  std::vector<std::string> hyps;
  std::vector<std::vector<std::string>> refs;  // reference streams, each parallel to hyps
  double bleu;
  double rouge;
};
#include "data/metric_cases.inc"

std::vector<Tokens> tokenize_all(const std::vector<std::string>& lines) {
  std::vector<Tokens> out;
  for (const auto& l : lines) out.push_back(split_tokens(l));
  return out;
}

// Streams x sentences -> per-sentence reference sets.
std::vector<std::vector<Tokens>> reference_sets(const MetricCase& c) {
  std::vector<std::vector<Tokens>> sets(c.hyps.size());
  for (const auto& stream : c.refs) {
    for (std::size_t i = 0; i < stream.size(); ++i) sets[i].push_back(split_tokens(stream[i]));
  }
  return sets;
}

TEST(Bleu, MatchesReferenceImplementation) {
  int index = 0;
  for (const auto& c : kMetricCases) {
    EXPECT_NEAR(eval::bleu(tokenize_all(c.hyps), reference_sets(c)), c.bleu, 1e-4) << "case " << index;
    ++index;
  }
  EXPECT_EQ(index, 20);
}

TEST(RougeL, MatchesReferenceImplementation) {
  int index = 0;
  for (const auto& c : kMetricCases) {
    EXPECT_NEAR(eval::rouge_l(tokenize_all(c.hyps), tokenize_all(c.refs[0])), c.rouge, 1e-4) << "case " << index;
    ++index;
  }
}

TEST(Bleu, IdentityIsHundred) {
  const std::vector<Tokens> text{{"the", "food", "was", "great", "and", "hot"}, {"we", "had", "a", "time"}};
  EXPECT_DOUBLE_EQ(eval::bleu(text, text), 100.0);
  EXPECT_DOUBLE_EQ(eval::rouge_l(text, text), 1.0);
}

TEST(Bleu, NoFourGramMatchScoresZero) {
  const std::vector<Tokens> hyp{{"a", "b", "c"}};
  const std::vector<Tokens> ref{{"a", "b", "c", "d"}};
  EXPECT_EQ(eval::bleu(hyp, ref), 0.0);
  EXPECT_GT(eval::bleu(hyp, ref, 2), 0.0);
}

TEST(Bleu, RejectsMisalignedInput) {
  const std::vector<Tokens> one{{"a"}};
  const std::vector<Tokens> two{{"a"}, {"b"}};
  EXPECT_THROW(eval::bleu(one, two), std::invalid_argument);
  EXPECT_THROW(eval::rouge_l(one, two), std::invalid_argument);
}

TEST(RougeL, SentenceLevelHandComputed) {
  // LCS("a b c d", "a c d e") = 3, P = R = 0.75, so F = 0.75 for any beta.
  EXPECT_NEAR(eval::rouge_l_sentence(Tokens{"a", "b", "c", "d"}, Tokens{"a", "c", "d", "e"}), 0.75, 1e-12);
  EXPECT_EQ(eval::rouge_l_sentence(Tokens{"x"}, Tokens{"y"}), 0.0);
}

TEST(Reports, JsonRoundTrip) {
  eval::EvalReport report{.tst_percent = 42.5, .s_bleu = 61.25, .r_bleu = 30.0, .rouge_l = 0.5, .mean2 = 51.875,
                          .n_examples = 8};
  EXPECT_EQ(eval::eval_report_from_json(eval::to_json(report)), report);
  report.r_bleu.reset();
  EXPECT_EQ(eval::eval_report_from_json(eval::to_json(report)), report);

  eval::SweepCurve curve{"EA", {{0.0, 50.0, 60.0, 0.3}, {0.5, 55.0, 70.0, 0.2}}};
  const auto back = eval::sweep_curve_from_json(eval::to_json(curve));
  ASSERT_EQ(back.points.size(), 2u);
  EXPECT_EQ(back.points[1].s_bleu_masked, 70.0);
  const auto csv = eval::sweep_csv(curve);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "lambda_epsilon,acc_percent,s_bleu_masked,mask_rate");
}

TEST(MaskingF1, MicroAveraged) {
  masking::StyleMaskedSentence a;
  a.tokens = {"<mask>", "x", "<mask>"};
  a.mask_positions = {0, 2};
  masking::StyleMaskedSentence b;
  b.tokens = {"y", "z"};
  const std::vector<masking::StyleMaskedSentence> masked{a, b};
  const std::vector<std::vector<std::size_t>> planted{{0}, {1}};
  const auto f1 = eval::masking_f1(masked, planted);
  EXPECT_DOUBLE_EQ(f1.precision, 0.5);
  EXPECT_DOUBLE_EQ(f1.recall, 0.5);
  EXPECT_DOUBLE_EQ(f1.f1, 0.5);
}

class ClassifierMetrics : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const std::string names[] = {"negative", "positive"};
    corpus_ = new Corpus(make_labels(names));
    const char* bad[] = {"bad", "awful", "rude"};
    const char* good[] = {"good", "great", "nice"};
    const char* food[] = {"pizza", "soup", "tea", "cake"};
    for (int i = 0; i < 120; ++i) {
      const int label = i % 2;
      Tokens t{"the", food[i % 4], "was", label ? good[i % 3] : bad[i % 3]};
      corpus_->add(i < 100 ? Split::kTrain : Split::kDev, {t, label, std::nullopt});
    }
    vocab_ = new Vocabulary(Vocabulary::build(*corpus_, 1));
    clf_ = new eval::EvalClassifier(eval::train_eval_classifier(
        *corpus_, *vocab_, {.embedding_dim = 8, .hidden_dim = 8, .epochs = 8, .learning_rate = 1e-2, .batch_size = 8}));
  }
  static void TearDownTestSuite() {
    delete clf_;
    delete vocab_;
    delete corpus_;
  }
  static Corpus* corpus_;
  static Vocabulary* vocab_;
  static eval::EvalClassifier* clf_;
};
Corpus* ClassifierMetrics::corpus_ = nullptr;
Vocabulary* ClassifierMetrics::vocab_ = nullptr;
eval::EvalClassifier* ClassifierMetrics::clf_ = nullptr;

TEST_F(ClassifierMetrics, LearnsToyTask) { EXPECT_GE(clf_->dev_accuracy, 0.95); }

TEST_F(ClassifierMetrics, TstPercentBinaryComplement) {
  std::vector<Tokens> outputs;
  std::vector<int> targets, flipped;
  for (const auto& ex : corpus_->split(Split::kTrain)) {
    outputs.push_back(ex.tokens);
    targets.push_back(ex.label);
    flipped.push_back(1 - ex.label);
  }
  const double a = eval::tst_percent(*clf_, outputs, targets, *vocab_);
  const double b = eval::tst_percent(*clf_, outputs, flipped, *vocab_);
  EXPECT_DOUBLE_EQ(a + b, 100.0);
}

TEST_F(ClassifierMetrics, MaskedTokensReadAsUnknown) {
  const Tokens masked{"the", "pizza", "was", "<mask>"};
  const auto ids = eval::encode_for_classifier(masked, *vocab_);
  EXPECT_EQ(ids.back(), Vocabulary::kUnk);
}

TEST_F(ClassifierMetrics, EvaluateTransferOnIdentityOutputs) {
  const auto& dev = corpus_->split(Split::kDev);
  std::vector<Tokens> outputs;
  std::vector<int> targets;
  for (const auto& ex : dev) {
    outputs.push_back(ex.tokens);
    targets.push_back(ex.label);
  }
  const auto report = eval::evaluate_transfer(*clf_, outputs, dev, targets, *vocab_);
  EXPECT_DOUBLE_EQ(report.s_bleu, 100.0);
  EXPECT_FALSE(report.r_bleu.has_value());
  EXPECT_DOUBLE_EQ(report.mean2, (report.tst_percent + report.s_bleu) / 2.0);
  EXPECT_EQ(report.n_examples, dev.size());
}

TEST_F(ClassifierMetrics, SweepRejectsBadGrid) {
  const masking::Attributor uniform = [](std::span<const int> ids) {
    attribution::AttributionVector v;
    v.scores.assign(ids.size(), 1.0 / static_cast<double>(ids.size()));
    return v;
  };
  const auto& dev = corpus_->split(Split::kDev);
  const double descending[] = {0.5, 0.1};
  EXPECT_THROW(eval::lambda_sweep(*clf_, dev, *vocab_, uniform, descending), ConfigError);
  const double grid[] = {0.0, 0.5};
  const auto curve = eval::lambda_sweep(*clf_, dev, *vocab_, uniform, grid);
  ASSERT_EQ(curve.points.size(), 2u);
  EXPECT_DOUBLE_EQ(curve.points[0].mask_rate, 1.0);
  EXPECT_DOUBLE_EQ(curve.points[1].mask_rate, 0.0);
  EXPECT_DOUBLE_EQ(curve.points[1].s_bleu_masked, 100.0);
}

}  // namespace
