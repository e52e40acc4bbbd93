#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bdw/ops.hpp"
#include "bdw/tensor.hpp"

namespace bdw {

using TokenId = std::uint32_t;
using Sequence = std::vector<TokenId>;

struct SpecialTokens {
  TokenId pad = 0;
  TokenId unk = 1;
  TokenId cls = 2;
  TokenId sep = 3;
  TokenId mask = 4;

  bool is_special(TokenId id) const { return id == pad || id == unk || id == cls || id == sep || id == mask; }
  bool operator==(const SpecialTokens&) const = default;
};

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t hidden_dim = 64;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = 200;
  std::size_t max_seq_len = 32;
  SpecialTokens special;

  std::size_t head_dim() const { return hidden_dim / num_heads; }
  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b;
  Tensor ln2_gain, ln2_bias;
  Tensor ffn_up_w, ffn_up_b, ffn_down_w, ffn_down_b;
};

struct ClassifierHead {
  Tensor weight;  // hidden_dim x num_classes
  Tensor bias;    // num_classes

  static ClassifierHead init(std::size_t hidden_dim, std::size_t num_classes, std::uint64_t seed);
  std::size_t num_classes() const { return bias.numel(); }
  std::vector<std::pair<std::string, Tensor>> named() const;
  ClassifierHead clone() const;
};

/// Weights of the encoder, its MLM head and (optionally) a classification head.
/// The "base" tensors are everything except the classification head.
struct EncoderParams {
  ModelConfig config;
  Tensor token_embedding;     // vocab x d
  Tensor position_embedding;  // max_seq_len x d
  std::vector<LayerParams> layers;
  Tensor final_ln_gain, final_ln_bias;
  Tensor mlm_w, mlm_b;  // d x vocab, vocab
  std::optional<ClassifierHead> head;

  static EncoderParams init(const ModelConfig& config, std::uint64_t seed);

  /// Base tensors in a fixed canonical order.
  std::vector<std::pair<std::string, Tensor>> named_base() const;
  std::vector<Tensor> base_tensors() const;
  /// Attention and FFN projection matrices of every layer.
  std::vector<Tensor> encoder_matrices() const;

  void set_base_trainable(bool trainable);
  /// Deep copy; the copy's trainability flags mirror the source.
  EncoderParams clone() const;
};

/// FNV-1a over the raw bytes of every base tensor.
std::uint64_t base_fingerprint(const EncoderParams& params);

/// A right-padded batch of token sequences in packed [batch*seq_len] layout.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> positions;
  std::vector<std::uint8_t> valid;
  std::vector<std::size_t> lengths;

  static Batch pack(std::span<const Sequence> sequences, TokenId pad);
  std::size_t row(std::size_t b, std::size_t i) const { return b * seq_len + i; }
};

struct PeftParams;

struct ForwardTrace {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t heads = 0;
  std::size_t prefix_len = 0;
  /// Per layer, post-softmax probabilities [batch*heads*seq_len, prefix_len+seq_len].
  std::vector<Tensor> attention;
  /// Per layer, the residual stream after that layer passed through the output norm.
  std::vector<Tensor> hidden;
  /// Per layer, the [CLS] rows of `hidden`, shape [batch, d].
  std::vector<Tensor> layer_cls;
  std::vector<std::uint8_t> key_valid;

  const Tensor& final_hidden() const { return hidden.back(); }
  const Tensor& cls() const { return layer_cls.back(); }
  double attention_at(std::size_t layer, std::size_t b, std::size_t head, std::size_t query, std::size_t key) const;
  /// Final-layer [CLS]-row attention on input token `token` (prefix columns
  /// skipped), averaged over heads.
  double cls_attention(std::size_t b, std::size_t token) const;
};

ForwardTrace forward(const EncoderParams& params, const Batch& batch, const PeftParams* peft = nullptr);
ForwardTrace forward(const EncoderParams& params, const Sequence& tokens, const PeftParams* peft = nullptr);

/// Final-layer [CLS] vector of sequence b.
std::vector<double> cls_output(const ForwardTrace& trace, std::size_t b = 0);

/// Logits over the vocabulary at the given packed row indices, [rows, vocab].
Tensor mlm_logits(const EncoderParams& params, const ForwardTrace& trace, std::span<const std::size_t> rows);

/// Class logits from the [CLS] output, [batch, num_classes].
Tensor classify(const EncoderParams& params, const ForwardTrace& trace);

}  // namespace bdw
