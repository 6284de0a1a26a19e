#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace deqei {

// Counter-based generator: output i is a hash of (key, i), so the stream
// position is a single u64 that can be saved and restored exactly.
// Named sub-streams derive independent keys from one root seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(mix_(seed ^ 0x9e3779b97f4a7c15ull)) {}
  Rng(uint64_t root_seed, std::string_view stream) : Rng(derive_key(root_seed, stream)) {}

  uint64_t next_u64() { return mix_(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

  // standard normal via Box-Muller; always consumes exactly two counter steps
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = 0x1.0p-53;  // guard log(0)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  uint64_t position() const { return counter_; }
  void seek(uint64_t position) { counter_ = position; }

  static uint64_t derive_key(uint64_t root_seed, std::string_view stream) {
    // FNV-1a over the stream name folded into the root seed
    uint64_t h = 1469598103934665603ull;
    for (char c : stream) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    return mix_(root_seed ^ h);
  }

 private:
  // splitmix64 finalizer
  static uint64_t mix_(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t key_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace deqei
