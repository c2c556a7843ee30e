#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace qkt {

using Rng = std::mt19937_64;

// Named top-level streams. Each consumer derives its own generator so that
// enabling one stage (e.g. probing) never shifts another stage's draws.
enum class Stream : std::uint64_t {
  data = 1,
  partition = 2,
  init = 3,
  training = 4,
  probing = 5,
  query = 6,
  transfer = 7,
  federated = 8,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(base);
  for (auto p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, Stream stream,
                                 std::initializer_list<std::uint64_t> path = {}) {
  std::uint64_t h = derive_seed(base, {static_cast<std::uint64_t>(stream)});
  for (auto p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

}  // namespace qkt
