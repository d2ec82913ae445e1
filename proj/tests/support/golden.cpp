#include "golden.hpp"

#include "bilm/rng.hpp"
#include "synthetic.hpp"

#ifndef BILM_TEST_DATA_DIR
#error "BILM_TEST_DATA_DIR must be defined"
#endif

namespace bilm::testing {

model::ModelState golden_model() { return model::init(tiny_config(kGoldenVocab, 64), kGoldenSeed); }

std::vector<int> golden_tokens() {
  Rng rng(77);
  std::vector<int> out(24);
  for (int& t : out) t = static_cast<int>(rng.below(kGoldenVocab));
  return out;
}

nlohmann::json golden_digest(const model::ForwardTrace& trace) {
  nlohmann::json head = nlohmann::json::array();
  nlohmann::json sums = nlohmann::json::array();
  for (int p = 0; p < trace.positions; ++p) {
    const auto row = trace.logits_at(p);
    head.push_back(std::vector<double>(row.begin(), row.begin() + kGoldenLogitsPerPosition));
    double s = 0.0;
    for (double v : row) s += v;
    sums.push_back(s);
  }
  return {{"head", head}, {"sums", sums}};
}

std::filesystem::path golden_path() {
  return std::filesystem::path(BILM_TEST_DATA_DIR) / "golden_tiny_logits.json";
}

}  // namespace bilm::testing
