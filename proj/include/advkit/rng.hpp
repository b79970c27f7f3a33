#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace advkit {

// All randomness in the toolkit flows through this generator. Distributions
// are implemented by hand on top of mt19937_64 because the engine is fully
// specified by the standard while std::*_distribution is not; results are
// therefore identical across compilers and platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (cosine branch only, no caching):
  //   z = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)
  // Consumes exactly two uniforms per draw.
  double gauss();

  // Rademacher +-1.
  int sign() { return (gen_() >> 63) ? 1 : -1; }

  // Uniform integer in [0, n) by rejection, unbiased.
  uint64_t uniform_int(uint64_t n);

  // Fisher-Yates shuffle of [0, n) expressed as an index permutation.
  template <class Vec>
  void shuffle(Vec& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

// Seed fan-out. One global seed is split into independent named streams
// (data shuffling, PNIL noise, attack randomness, ...) so that toggling one
// randomness source leaves the others untouched. The split is
//   sub_seed = splitmix64(seed ^ fnv1a64(name))
// and further per-index derivation mixes the index through splitmix64 again.
uint64_t fnv1a64(std::string_view s);
uint64_t splitmix64(uint64_t x);
uint64_t derive_seed(uint64_t seed, std::string_view stream);
uint64_t derive_seed(uint64_t seed, uint64_t index);
uint64_t derive_seed(uint64_t seed, uint64_t index, uint64_t draw);
uint64_t derive_seed(uint64_t seed, std::string_view stream, uint64_t index);
uint64_t derive_seed(uint64_t seed, std::string_view stream, uint64_t index,
                     uint64_t draw);

}  // namespace advkit
