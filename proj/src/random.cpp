#include "bdw/random.hpp"

#include <algorithm>

namespace bdw {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng Rng::derive(std::uint64_t seed, std::uint64_t tag) { return Rng(mix_seed(seed, tag)); }

Tensor Rng::normal_tensor(Shape shape, double stddev, bool requires_grad) {
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = normal(stddev);
  return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

}  // namespace bdw
