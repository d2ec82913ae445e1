#include <benchmark/benchmark.h>

#include <sstream>
#include <string>
#include <vector>

#include "bilm/model.hpp"
#include "bilm/rng.hpp"
#include "bilm/tokenizer.hpp"

namespace {

// Pseudo-words over a small alphabet, one document per line.
std::string random_text(uint64_t seed, size_t lines, const char* alphabet) {
  bilm::Rng rng(seed);
  const std::string letters(alphabet);
  std::string out;
  for (size_t l = 0; l < lines; ++l) {
    const uint64_t words = 4 + rng.below(12);
    for (uint64_t w = 0; w < words; ++w) {
      const uint64_t len = 2 + rng.below(6);
      for (uint64_t c = 0; c < len; ++c) out += letters[rng.below(letters.size())];
      out += ' ';
    }
    out += '\n';
  }
  return out;
}

const bilm::tok::TokenizerModel& tokenizer() {
  static const bilm::tok::TokenizerModel t = [] {
    std::istringstream a(random_text(1, 2000, "aeioustrnlkm"));
    std::istringstream b(random_text(2, 2000, "aeıoüşçğrnlkm"));
    return bilm::tok::train_tokenizer(a, b, {2000, 1024, 7});
  }();
  return t;
}

std::vector<int> random_tokens(size_t n, int vocab, uint64_t seed) {
  bilm::Rng rng(seed);
  std::vector<int> out(n);
  for (int& t : out) t = static_cast<int>(rng.below(static_cast<uint64_t>(vocab)));
  return out;
}

void BM_Forward(benchmark::State& state) {
  const int T = static_cast<int>(state.range(0));
  const auto model = bilm::model::init(bilm::model::ModelConfig::tiny(1024), 1);
  const auto tokens = random_tokens(static_cast<size_t>(T), 1024, 3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(bilm::model::forward(model, tokens).logits.data());
  }
  state.SetItemsProcessed(state.iterations() * T);
}
BENCHMARK(BM_Forward)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_LossAndGrads(benchmark::State& state) {
  const int T = static_cast<int>(state.range(0));
  const auto model = bilm::model::init(bilm::model::ModelConfig::tiny(1024), 1);
  std::vector<std::vector<int>> rows;
  for (uint64_t r = 0; r < 4; ++r) rows.push_back(random_tokens(static_cast<size_t>(T), 1024, r));
  const std::vector<std::span<const int>> views(rows.begin(), rows.end());
  for (auto _ : state) {
    benchmark::DoNotOptimize(bilm::model::loss_and_grads(model, views).loss);
  }
  state.SetItemsProcessed(state.iterations() * 4 * T);
}
BENCHMARK(BM_LossAndGrads)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_Encode(benchmark::State& state) {
  const std::string text = random_text(9, 200, "aeioustrnlkm");
  const auto& tok = tokenizer();
  for (auto _ : state) {
    benchmark::DoNotOptimize(tok.encode(text).data());
  }
  state.SetBytesProcessed(state.iterations() * static_cast<int64_t>(text.size()));
}
BENCHMARK(BM_Encode);

}  // namespace

BENCHMARK_MAIN();
