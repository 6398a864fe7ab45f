#include "jointseg/random.hpp"

namespace jointseg {

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view bytes, uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

uint64_t SeedStreams::derive(std::string_view name, uint64_t index) const {
  return splitmix64(splitmix64(seed_ ^ fnv1a(name)) + index);
}

}  // namespace jointseg
