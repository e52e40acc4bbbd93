#include "bdw/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace bdw {

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

Optimizer::Optimizer(OptimizerConfig config) : config_(config) {
  if (!(config_.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
}

void Optimizer::step(std::span<Tensor> params) {
  for (const auto& p : params) {
    if (p.requires_grad() && !p.has_grad()) {
      throw std::logic_error("optimizer step on tensor " + std::to_string(p.id()) + " without a gradient");
    }
  }
  ++steps_;
  const double lr = config_.learning_rate;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (auto& p : params) {
    if (!p.requires_grad()) continue;
    auto w = p.mutable_values();
    auto g = p.grad();
    if (config_.kind == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    } else {
      auto& mom = moments_[p.id()];
      if (mom.m.empty()) {
        mom.m.assign(w.size(), 0.0);
        mom.v.assign(w.size(), 0.0);
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        mom.m[i] = config_.beta1 * mom.m[i] + (1.0 - config_.beta1) * g[i];
        mom.v[i] = config_.beta2 * mom.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double mhat = mom.m[i] / bc1;
        const double vhat = mom.v[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
    }
    check_finite(w, "optimizer step");
    p.clear_grad();
  }
}

}  // namespace bdw
