#pragma once

// The recorded Tiny model used by oracle tests: Tiny preset, vocabulary 300,
// context 64, parameter seed 123, scored on a fixed token sequence.

#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "bilm/model.hpp"

namespace bilm::testing {

inline constexpr int kGoldenVocab = 300;
inline constexpr uint64_t kGoldenSeed = 123;
inline constexpr int kGoldenLogitsPerPosition = 16;

model::ModelState golden_model();
std::vector<int> golden_tokens();

// Digest of a forward pass: the first logits of every position plus
// per-position sums, which is what the golden file stores.
nlohmann::json golden_digest(const model::ForwardTrace& trace);

std::filesystem::path golden_path();

}  // namespace bilm::testing
