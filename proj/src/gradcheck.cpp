#include "bdw/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "bdw/random.hpp"

namespace bdw {

GradCheckResult gradcheck(const std::function<Tensor()>& loss, std::span<const Tensor> inputs,
                          std::span<const std::string> names, const GradCheckOptions& options) {
  if (!names.empty() && names.size() != inputs.size()) throw std::invalid_argument("one name per input expected");
  std::vector<bool> flags;
  for (const auto& t : inputs) {
    flags.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.clear_grad();
  }
  Tensor value = loss();
  if (value.numel() != 1) throw std::invalid_argument("gradcheck needs a scalar loss");
  backward(value);
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    analytic.emplace_back(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
    t.clear_grad();
  }

  GradCheckResult result;
  Rng rng(options.seed);
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& t = inputs[i];
    std::vector<std::size_t> entries(t.numel());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries > 0 && entries.size() > options.max_entries) {
      rng.shuffle(entries);
      entries.resize(options.max_entries);
    }
    auto values = t.mutable_values();
    for (auto e : entries) {
      const double saved = values[e];
      values[e] = saved + options.step;
      const double up = loss().item();
      values[e] = saved - options.step;
      const double down = loss().item();
      values[e] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[i][e];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
      ++result.checked;
      if (err > result.max_error || std::isnan(err)) {
        result.max_error = std::isnan(err) ? INFINITY : err;
        result.worst = (names.empty() ? "input " + std::to_string(i) : names[i]) + "[" + std::to_string(e) + "]";
      }
    }
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) inputs[i].set_requires_grad(flags[i]);
  return result;
}

}  // namespace bdw
