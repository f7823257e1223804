#pragma once

#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <string_view>

namespace clan_forge {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent seed for sub-stream `stream`, item `index` of a base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(splitmix64(base) ^ (stream * 0xd6e8feb86659fd93ULL)) ^ index);
}

// Named seed streams.
namespace streams {
inline constexpr std::uint64_t extractor = 1;
inline constexpr std::uint64_t classifier1 = 2;
inline constexpr std::uint64_t classifier2 = 3;
inline constexpr std::uint64_t discriminator = 4;
inline constexpr std::uint64_t batches = 5;
inline constexpr std::uint64_t source_scenes = 11;
inline constexpr std::uint64_t target_scenes = 12;
inline constexpr std::uint64_t render = 13;
}  // namespace streams

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace clan_forge
