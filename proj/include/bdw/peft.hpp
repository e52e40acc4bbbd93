#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bdw/model.hpp"
#include "bdw/tensor.hpp"

namespace bdw {

enum class PeftKind { adapter, lora, prefix };

PeftKind parse_peft_kind(const std::string& name);
std::string to_string(PeftKind kind);

struct PeftConfig {
  PeftKind kind = PeftKind::adapter;
  std::size_t reduction_factor = 4;  // adapter
  std::size_t rank = 4;              // lora
  double alpha = 4.0;                // lora
  std::size_t prefix_length = 8;     // prefix
  std::size_t bottleneck = 32;       // prefix

  void validate(const ModelConfig& model) const;
  bool operator==(const PeftConfig&) const = default;
};

/// Bottleneck inserted after the FFN sub-layer: f + up(gelu(down(f))).
struct AdapterLayer {
  Tensor down_w, down_b;  // d x d/r, d/r
  Tensor up_w, up_b;      // d/r x d, d
};

/// Low-rank deltas (alpha/rank) * x A B on the query and value projections.
struct LoraLayer {
  Tensor query_a, query_b;  // d x r, r x d
  Tensor value_a, value_b;
};

/// Prefix keys/values for one layer. During training they are produced by the
/// reparametrization embedding x projection; an exported prefix keeps only the
/// derived [prefix_length, 2d] key/value block.
struct PrefixLayer {
  Tensor embedding;   // prefix_length x bottleneck
  Tensor projection;  // bottleneck x 2d
  Tensor exported_kv;  // prefix_length x 2d, set only after export

  bool is_exported() const { return exported_kv.defined(); }
};

struct PeftParams {
  PeftConfig config;
  std::vector<AdapterLayer> adapters;
  std::vector<LoraLayer> lora;
  std::vector<PrefixLayer> prefix;  // empty when prefix_length == 0

  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> tensors() const;
  PeftParams clone() const;
  std::size_t parameter_count() const;
};

PeftParams attach(const PeftConfig& config, const ModelConfig& model, std::uint64_t seed);

struct LayerMatrix {
  std::size_t layer;
  std::string name;
  Tensor weight;
};

/// The weight matrices the neuron amplification loss sums over: adapter
/// down/up projections, LoRA A/B factors, prefix reparametrization matrices.
/// Bias vectors and derived prefixes are not included.
std::vector<LayerMatrix> collect_weight_matrices(const PeftParams& peft);

/// Replaces each prefix reparametrization with its derived key/value block.
PeftParams export_prefix(const PeftParams& peft);

/// Per-layer prefix keys and values consumed by the attention of `layer`.
std::optional<std::pair<Tensor, Tensor>> prefix_key_values(const PeftParams& peft, std::size_t layer,
                                                           std::size_t hidden_dim);

}  // namespace bdw
