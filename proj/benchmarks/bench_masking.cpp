#include "smlm/masking.hpp"

#include <benchmark/benchmark.h>

#include <random>

namespace {

// Random attribution batch with sentences of 5..40 tokens and about
// `tokens` scores in total.
smlm::masking::AttributionBatch make_batch(std::size_t tokens, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> length(5, 40);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  smlm::masking::AttributionBatch batch;
  std::vector<double> scores;
  while (batch.total_tokens() < tokens) {
    scores.resize(std::min(length(rng), tokens - batch.total_tokens()));
    double sum = 0.0;
    for (auto& s : scores) sum += (s = unit(rng));
    for (auto& s : scores) s /= sum;
    batch.append(scores);
  }
  return batch;
}

void BM_MaskBatch(benchmark::State& state) {
  const auto batch = make_batch(static_cast<std::size_t>(state.range(0)), 42);
  for (auto _ : state) {
    auto mask = smlm::masking::attention_surplus_mask_batch(batch, 0.15);
    benchmark::DoNotOptimize(mask.data());
  }
  state.SetComplexityN(state.range(0));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * state.range(0));
}
BENCHMARK(BM_MaskBatch)->RangeMultiplier(10)->Range(10'000, 1'000'000)->Complexity(benchmark::oN);

void BM_MaskPerSentence(benchmark::State& state) {
  const auto batch = make_batch(static_cast<std::size_t>(state.range(0)), 42);
  for (auto _ : state) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < batch.sentences(); ++i) {
      const std::span<const double> s(batch.scores.data() + batch.offsets[i], batch.offsets[i + 1] - batch.offsets[i]);
      for (auto m : smlm::masking::attention_surplus_mask(s, 0.15)) hits += m;
    }
    benchmark::DoNotOptimize(hits);
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_MaskPerSentence)->RangeMultiplier(10)->Range(10'000, 1'000'000)->Complexity(benchmark::oN);

}  // namespace

BENCHMARK_MAIN();
