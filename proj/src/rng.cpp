#include "advkit/rng.hpp"

#include <cmath>

namespace advkit {

double Rng::gauss() {
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log1p(-u1));
  return r * std::cos(2.0 * 3.14159265358979323846 * u2);
}

uint64_t Rng::uniform_int(uint64_t n) {
  if (n == 0) return 0;
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = gen_();
  } while (x >= limit);
  return x % n;
}

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t seed, std::string_view stream) {
  return splitmix64(seed ^ fnv1a64(stream));
}

uint64_t derive_seed(uint64_t seed, uint64_t index) {
  return splitmix64(seed ^ splitmix64(index));
}

uint64_t derive_seed(uint64_t seed, uint64_t index, uint64_t draw) {
  return derive_seed(derive_seed(seed, index), draw);
}

uint64_t derive_seed(uint64_t seed, std::string_view stream, uint64_t index) {
  return derive_seed(derive_seed(seed, stream), index);
}

uint64_t derive_seed(uint64_t seed, std::string_view stream, uint64_t index,
                     uint64_t draw) {
  return derive_seed(derive_seed(seed, stream, index), draw);
}

}  // namespace advkit
