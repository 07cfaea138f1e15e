#pragma once

// Named random streams. Every consumer of randomness (init, data order,
// dropout, synthetic data, fusion) derives its own generator from the master
// seed plus a stream tag and indices, so drawing from one stream never
// perturbs another. That is what makes paired-schedule runs bitwise
// comparable: dropout for (block, step) is the same numbers no matter which
// schedule asks for them.

#include <cstdint>
#include <random>
#include <string_view>

#include "bicovg/tensor.hpp"

namespace bicovg {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t stream_seed(std::uint64_t master, std::string_view tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t s = master;
  std::uint64_t x = splitmix64(s) ^ fnv1a64(tag);
  s = x;
  x = splitmix64(s) ^ (a * 0x9e3779b97f4a7c15ull + 1);
  s = x;
  x = splitmix64(s) ^ (b * 0xd1b54a32d192ed03ull + 1);
  s = x;
  return splitmix64(s);
}

inline std::mt19937_64 stream_rng(std::uint64_t master, std::string_view tag,
                                  std::uint64_t a = 0, std::uint64_t b = 0) {
  return std::mt19937_64(stream_seed(master, tag, a, b));
}

inline Tensor4 uniform_tensor(Shape4 s, double lo, double hi,
                              std::mt19937_64& rng) {
  Tensor4 t = Tensor4::zeros(s);
  std::uniform_real_distribution<double> d(lo, hi);
  double* p = t.data();
  int64_t n = t.elems();
  for (int64_t i = 0; i < n; ++i) p[i] = d(rng);
  return t;
}

inline Tensor4 normal_tensor(Shape4 s, double mean, double sd,
                             std::mt19937_64& rng) {
  Tensor4 t = Tensor4::zeros(s);
  std::normal_distribution<double> d(mean, sd);
  double* p = t.data();
  int64_t n = t.elems();
  for (int64_t i = 0; i < n; ++i) p[i] = d(rng);
  return t;
}

}  // namespace bicovg
