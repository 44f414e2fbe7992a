#pragma once

// Keyed random streams: every (seed, step, sample, layer) tuple maps to its
// own engine, so draws do not depend on evaluation order.

#include <cstdint>
#include <random>

#include "dvi/gaussmoments.hpp"

namespace dvi {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

inline std::uint64_t stream_key(std::uint64_t seed, std::uint64_t step, std::uint64_t sample, std::uint64_t layer) {
  std::uint64_t h = detail::splitmix64(seed);
  h = detail::splitmix64(h ^ step);
  h = detail::splitmix64(h ^ (sample + 0x51ed270b27ULL));
  h = detail::splitmix64(h ^ (layer + 0x2545f4914fULL));
  return h;
}

class KeyedStream {
 public:
  KeyedStream(std::uint64_t seed, std::uint64_t step, std::uint64_t sample, std::uint64_t layer)
      : gen_(stream_key(seed, step, sample, layer)) {}

  double normal() { return normal_(gen_); }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal_(gen_);
    return m;
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace dvi
