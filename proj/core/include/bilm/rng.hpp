#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace bilm {

// Seeded generator with distributions implemented on top of the raw engine
// output, so streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t below(uint64_t n);

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; the second variate is cached.
  double normal();

  template <class T>
  void shuffle(std::span<T> items) {
    for (size_t i = items.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      using std::swap;
      swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent seed from (a, b); splitmix64 finaliser.
uint64_t mix_seed(uint64_t a, uint64_t b);

// Stable 64-bit FNV-1a of a string, used to salt seeds with record ids.
uint64_t string_seed(std::string_view s);

}  // namespace bilm
