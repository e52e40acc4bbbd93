#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "bdw/tensor.hpp"

namespace bdw {

/// Seeded generator used everywhere randomness enters. Child streams are
/// derived from (seed, tag) so that independent consumers never share state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  static Rng derive(std::uint64_t seed, std::uint64_t tag);

  double normal(double stddev) { return std::normal_distribution<double>(0.0, stddev)(engine_); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  /// Uniform integer in [lo, hi].
  std::size_t uniform_int(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_);
  }
  std::uint64_t next() { return engine_(); }
  template <typename T>
  void shuffle(std::vector<T>& items) {
    std::shuffle(items.begin(), items.end(), engine_);
  }

  Tensor normal_tensor(Shape shape, double stddev, bool requires_grad = false);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace bdw
