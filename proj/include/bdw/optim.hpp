#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bdw/tensor.hpp"

namespace bdw {

enum class OptimizerKind { sgd, adam };

OptimizerKind parse_optimizer_kind(const std::string& name);
std::string to_string(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Holds per-tensor Adam moments keyed by tensor id.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  /// Applies one update to every trainable tensor in `params` and clears
  /// their grads. Tensors with requires_grad unset are skipped untouched.
  void step(std::span<Tensor> params);

  const OptimizerConfig& config() const { return config_; }
  std::uint64_t steps() const { return steps_; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  OptimizerConfig config_;
  std::uint64_t steps_ = 0;
  std::map<std::uint64_t, Moments> moments_;
};

}  // namespace bdw
