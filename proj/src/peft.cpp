#include "bdw/peft.hpp"

#include <stdexcept>

#include "bdw/ops.hpp"
#include "bdw/random.hpp"

namespace bdw {

namespace {
constexpr double kAdapterInitStd = 1e-3;
constexpr double kFactorInitStd = 0.02;
}  // namespace

PeftKind parse_peft_kind(const std::string& name) {
  if (name == "adapter") return PeftKind::adapter;
  if (name == "lora") return PeftKind::lora;
  if (name == "prefix") return PeftKind::prefix;
  throw std::invalid_argument("unknown PEFT variant '" + name + "'");
}

std::string to_string(PeftKind kind) {
  switch (kind) {
    case PeftKind::adapter: return "adapter";
    case PeftKind::lora: return "lora";
    case PeftKind::prefix: return "prefix";
  }
  return "unknown";
}

void PeftConfig::validate(const ModelConfig& model) const {
  switch (kind) {
    case PeftKind::adapter:
      if (reduction_factor < 1) throw std::invalid_argument("adapter reduction_factor must be >= 1");
      if (model.hidden_dim % reduction_factor != 0) {
        throw std::invalid_argument("adapter reduction_factor must divide hidden_dim");
      }
      break;
    case PeftKind::lora:
      if (rank < 1) throw std::invalid_argument("LoRA rank must be >= 1");
      if (!(alpha > 0.0)) throw std::invalid_argument("LoRA alpha must be positive");
      if (rank > model.hidden_dim) throw std::invalid_argument("LoRA rank exceeds hidden_dim");
      break;
    case PeftKind::prefix:
      if (bottleneck < 1) throw std::invalid_argument("prefix bottleneck must be >= 1");
      break;
  }
}

std::vector<std::pair<std::string, Tensor>> PeftParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t l = 0; l < adapters.size(); ++l) {
    const std::string pre = "adapter" + std::to_string(l) + ".";
    out.emplace_back(pre + "down.w", adapters[l].down_w);
    out.emplace_back(pre + "down.b", adapters[l].down_b);
    out.emplace_back(pre + "up.w", adapters[l].up_w);
    out.emplace_back(pre + "up.b", adapters[l].up_b);
  }
  for (std::size_t l = 0; l < lora.size(); ++l) {
    const std::string pre = "lora" + std::to_string(l) + ".";
    out.emplace_back(pre + "query.a", lora[l].query_a);
    out.emplace_back(pre + "query.b", lora[l].query_b);
    out.emplace_back(pre + "value.a", lora[l].value_a);
    out.emplace_back(pre + "value.b", lora[l].value_b);
  }
  for (std::size_t l = 0; l < prefix.size(); ++l) {
    const std::string pre = "prefix" + std::to_string(l) + ".";
    if (prefix[l].is_exported()) {
      out.emplace_back(pre + "kv", prefix[l].exported_kv);
    } else {
      out.emplace_back(pre + "embedding", prefix[l].embedding);
      out.emplace_back(pre + "projection", prefix[l].projection);
    }
  }
  return out;
}

std::vector<Tensor> PeftParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

PeftParams PeftParams::clone() const {
  PeftParams p;
  p.config = config;
  auto c = [](const Tensor& t) { return t.defined() ? t.clone(t.requires_grad()) : Tensor(); };
  for (const auto& a : adapters) p.adapters.push_back({c(a.down_w), c(a.down_b), c(a.up_w), c(a.up_b)});
  for (const auto& r : lora) p.lora.push_back({c(r.query_a), c(r.query_b), c(r.value_a), c(r.value_b)});
  for (const auto& x : prefix) p.prefix.push_back({c(x.embedding), c(x.projection), c(x.exported_kv)});
  return p;
}

std::size_t PeftParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.numel();
  return n;
}

PeftParams attach(const PeftConfig& config, const ModelConfig& model, std::uint64_t seed) {
  model.validate();
  config.validate(model);
  auto rng = Rng::derive(seed, 0x9ef7);
  const std::size_t d = model.hidden_dim;
  PeftParams p;
  p.config = config;
  for (std::size_t l = 0; l < model.num_layers; ++l) {
    switch (config.kind) {
      case PeftKind::adapter: {
        const std::size_t m = d / config.reduction_factor;
        p.adapters.push_back(AdapterLayer{rng.normal_tensor({d, m}, kAdapterInitStd, true), Tensor::zeros({m}, true),
                                          rng.normal_tensor({m, d}, kAdapterInitStd, true), Tensor::zeros({d}, true)});
        break;
      }
      case PeftKind::lora: {
        const std::size_t r = config.rank;
        LoraLayer layer;
        layer.query_a = rng.normal_tensor({d, r}, kFactorInitStd, true);
        layer.query_b = Tensor::zeros({r, d}, true);
        layer.value_a = rng.normal_tensor({d, r}, kFactorInitStd, true);
        layer.value_b = Tensor::zeros({r, d}, true);
        p.lora.push_back(std::move(layer));
        break;
      }
      case PeftKind::prefix: {
        if (config.prefix_length == 0) break;
        PrefixLayer layer;
        layer.embedding = rng.normal_tensor({config.prefix_length, config.bottleneck}, kFactorInitStd, true);
        layer.projection = rng.normal_tensor({config.bottleneck, 2 * d}, kFactorInitStd, true);
        p.prefix.push_back(std::move(layer));
        break;
      }
    }
  }
  return p;
}

std::vector<LayerMatrix> collect_weight_matrices(const PeftParams& peft) {
  std::vector<LayerMatrix> out;
  for (std::size_t l = 0; l < peft.adapters.size(); ++l) {
    out.push_back({l, "adapter.down", peft.adapters[l].down_w});
    out.push_back({l, "adapter.up", peft.adapters[l].up_w});
  }
  for (std::size_t l = 0; l < peft.lora.size(); ++l) {
    out.push_back({l, "lora.query.a", peft.lora[l].query_a});
    out.push_back({l, "lora.query.b", peft.lora[l].query_b});
    out.push_back({l, "lora.value.a", peft.lora[l].value_a});
    out.push_back({l, "lora.value.b", peft.lora[l].value_b});
  }
  for (std::size_t l = 0; l < peft.prefix.size(); ++l) {
    if (peft.prefix[l].is_exported()) continue;
    out.push_back({l, "prefix.embedding", peft.prefix[l].embedding});
    out.push_back({l, "prefix.projection", peft.prefix[l].projection});
  }
  return out;
}

std::optional<std::pair<Tensor, Tensor>> prefix_key_values(const PeftParams& peft, std::size_t layer,
                                                           std::size_t hidden_dim) {
  if (peft.prefix.empty()) return std::nullopt;
  const auto& p = peft.prefix.at(layer);
  Tensor kv = p.is_exported() ? p.exported_kv : ops::matmul(p.embedding, p.projection);
  return std::make_pair(ops::slice_cols(kv, 0, hidden_dim), ops::slice_cols(kv, hidden_dim, hidden_dim));
}

PeftParams export_prefix(const PeftParams& peft) {
  PeftParams out = peft.clone();
  NoGradGuard no_grad;
  for (auto& p : out.prefix) {
    if (p.is_exported()) continue;
    p.exported_kv = ops::matmul(p.embedding, p.projection);
    p.embedding = Tensor();
    p.projection = Tensor();
  }
  return out;
}

}  // namespace bdw
