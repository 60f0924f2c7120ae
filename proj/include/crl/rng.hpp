#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace crl {

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for a named substream of a root seed. Streams with different names are
// independent, so toggling one consumer never shifts another's draws.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
  return splitmix64(root ^ splitmix64(fnv1a64(name)));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name,
                                 std::uint64_t index) {
  return splitmix64(derive_seed(root, name) + splitmix64(index + 1));
}

inline std::mt19937_64 substream(std::uint64_t root, std::string_view name) {
  return std::mt19937_64(derive_seed(root, name));
}

inline std::mt19937_64 substream(std::uint64_t root, std::string_view name,
                                 std::uint64_t index) {
  return std::mt19937_64(derive_seed(root, name, index));
}

}  // namespace crl
