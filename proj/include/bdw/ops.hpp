#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "bdw/tensor.hpp"

// Differentiable operations. Every op records a backward rule on the active
// tape when gradients are enabled and at least one input requires grad.
// Rank-2 ops treat a rank-1 input of length n as a 1 x n row.
namespace bdw::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// a[m x n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias);

Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// sqrt(sum(w^2) + epsilon) as a scalar.
Tensor smoothed_l2_norm(const Tensor& w, double epsilon = 1e-8);
/// Per-row sqrt(sum_j x_ij^2 + epsilon), shape [rows].
Tensor row_norms(const Tensor& x, double epsilon = 1e-8);
/// Rows scaled to unit length (norm smoothed by epsilon).
Tensor normalize_rows(const Tensor& x, double epsilon = 1e-12);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum of a[i] * weights[i] with constant weights.
Tensor weighted_sum(const Tensor& a, std::span<const double> weights);

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);

/// Mean over rows of -log softmax(logits[r])[labels[r]].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);
Tensor cross_entropy(const Tensor& logits, std::size_t label);

/// Batched multi-head attention over a packed [batch*seq_len, d] layout.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t seq_len = 1;
  std::size_t heads = 1;
  /// batch*seq_len flags; keys with flag 0 get exactly zero probability.
  std::vector<std::uint8_t> key_valid;
};

/// Post-softmax attention probabilities, shape [batch*heads*seq_len, prefix+seq_len].
/// Row (b*heads + h)*seq_len + i holds query i of sequence b in head h; the
/// first `prefix` columns are the prefix keys shared by every sequence.
Tensor attention_probs(const Tensor& q, const Tensor& k, const std::optional<Tensor>& prefix_k,
                       const AttentionLayout& layout);
/// Weighted sum of values under `probs`, shape [batch*seq_len, d].
Tensor attention_context(const Tensor& probs, const Tensor& v, const std::optional<Tensor>& prefix_v,
                         const AttentionLayout& layout);

}  // namespace bdw::ops
