#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace jointseg {

using Rng = std::mt19937_64;

// Per-run randomness: every consumer draws from a named substream derived
// from one seed, so adding a consumer never shifts another's sequence.
class SeedStreams {
 public:
  explicit SeedStreams(uint64_t seed) : seed_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t derive(std::string_view name, uint64_t index = 0) const;
  Rng stream(std::string_view name, uint64_t index = 0) const { return Rng(derive(name, index)); }

 private:
  uint64_t seed_;
};

uint64_t splitmix64(uint64_t x);
uint64_t fnv1a(std::string_view bytes, uint64_t h = 1469598103934665603ULL);

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi) {
  return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
}

}  // namespace jointseg
