#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "bdw/tensor.hpp"

namespace bdw {

struct GradCheckResult {
  double max_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Relative errors are taken against max(|analytic|, |numeric|, floor).
  double floor = 1e-3;
  /// Entries probed per tensor; 0 probes all of them.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
};

/// Tape gradients of `loss` with respect to `inputs` against central
/// differences. `loss` must rebuild the graph from the current input values
/// on every call. Input grads are cleared on return.
GradCheckResult gradcheck(const std::function<Tensor()>& loss, std::span<const Tensor> inputs,
                          std::span<const std::string> names = {}, const GradCheckOptions& options = {});

}  // namespace bdw
