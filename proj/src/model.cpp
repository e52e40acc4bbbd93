#include "bdw/model.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

#include "bdw/peft.hpp"
#include "bdw/random.hpp"

namespace bdw {

namespace {
constexpr double kInitStd = 0.02;

Tensor ones(std::size_t n) { return Tensor::filled({n}, 1.0); }
Tensor zeros(std::size_t n) { return Tensor::zeros({n}); }
}  // namespace

void ModelConfig::validate() const {
  if (num_layers == 0 || num_heads == 0 || hidden_dim == 0 || ffn_dim == 0 || vocab_size == 0 || max_seq_len == 0) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  if (hidden_dim % num_heads != 0) throw std::invalid_argument("hidden_dim must be divisible by num_heads");
  const TokenId ids[] = {special.pad, special.unk, special.cls, special.sep, special.mask};
  for (std::size_t i = 0; i < 5; ++i) {
    if (ids[i] >= vocab_size) throw std::invalid_argument("special token id out of vocabulary range");
    for (std::size_t j = 0; j < i; ++j) {
      if (ids[i] == ids[j]) throw std::invalid_argument("special token ids must be distinct");
    }
  }
}

ClassifierHead ClassifierHead::init(std::size_t hidden_dim, std::size_t num_classes, std::uint64_t seed) {
  auto rng = Rng::derive(seed, 0x4ead);
  return ClassifierHead{rng.normal_tensor({hidden_dim, num_classes}, kInitStd), Tensor::zeros({num_classes})};
}

std::vector<std::pair<std::string, Tensor>> ClassifierHead::named() const {
  return {{"head.weight", weight}, {"head.bias", bias}};
}

ClassifierHead ClassifierHead::clone() const {
  return ClassifierHead{weight.clone(weight.requires_grad()), bias.clone(bias.requires_grad())};
}

EncoderParams EncoderParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  auto rng = Rng::derive(seed, 0xe5c0);
  const std::size_t d = config.hidden_dim, f = config.ffn_dim;
  EncoderParams p;
  p.config = config;
  p.token_embedding = rng.normal_tensor({config.vocab_size, d}, kInitStd);
  p.position_embedding = rng.normal_tensor({config.max_seq_len, d}, kInitStd);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerParams layer;
    layer.ln1_gain = ones(d);
    layer.ln1_bias = zeros(d);
    layer.query_w = rng.normal_tensor({d, d}, kInitStd);
    layer.query_b = zeros(d);
    layer.key_w = rng.normal_tensor({d, d}, kInitStd);
    layer.key_b = zeros(d);
    layer.value_w = rng.normal_tensor({d, d}, kInitStd);
    layer.value_b = zeros(d);
    layer.out_w = rng.normal_tensor({d, d}, kInitStd);
    layer.out_b = zeros(d);
    layer.ln2_gain = ones(d);
    layer.ln2_bias = zeros(d);
    layer.ffn_up_w = rng.normal_tensor({d, f}, kInitStd);
    layer.ffn_up_b = zeros(f);
    layer.ffn_down_w = rng.normal_tensor({f, d}, kInitStd);
    layer.ffn_down_b = zeros(d);
    p.layers.push_back(std::move(layer));
  }
  p.final_ln_gain = ones(d);
  p.final_ln_bias = zeros(d);
  p.mlm_w = rng.normal_tensor({d, config.vocab_size}, kInitStd);
  p.mlm_b = zeros(config.vocab_size);
  return p;
}

std::vector<std::pair<std::string, Tensor>> EncoderParams::named_base() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("token_embedding", token_embedding);
  out.emplace_back("position_embedding", position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    out.emplace_back(pre + "ln1.gain", L.ln1_gain);
    out.emplace_back(pre + "ln1.bias", L.ln1_bias);
    out.emplace_back(pre + "query.w", L.query_w);
    out.emplace_back(pre + "query.b", L.query_b);
    out.emplace_back(pre + "key.w", L.key_w);
    out.emplace_back(pre + "key.b", L.key_b);
    out.emplace_back(pre + "value.w", L.value_w);
    out.emplace_back(pre + "value.b", L.value_b);
    out.emplace_back(pre + "out.w", L.out_w);
    out.emplace_back(pre + "out.b", L.out_b);
    out.emplace_back(pre + "ln2.gain", L.ln2_gain);
    out.emplace_back(pre + "ln2.bias", L.ln2_bias);
    out.emplace_back(pre + "ffn_up.w", L.ffn_up_w);
    out.emplace_back(pre + "ffn_up.b", L.ffn_up_b);
    out.emplace_back(pre + "ffn_down.w", L.ffn_down_w);
    out.emplace_back(pre + "ffn_down.b", L.ffn_down_b);
  }
  out.emplace_back("final_ln.gain", final_ln_gain);
  out.emplace_back("final_ln.bias", final_ln_bias);
  out.emplace_back("mlm.w", mlm_w);
  out.emplace_back("mlm.b", mlm_b);
  return out;
}

std::vector<Tensor> EncoderParams::base_tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_base()) out.push_back(t);
  return out;
}

std::vector<Tensor> EncoderParams::encoder_matrices() const {
  std::vector<Tensor> out;
  for (const auto& L : layers) {
    for (const auto& t : {L.query_w, L.key_w, L.value_w, L.out_w, L.ffn_up_w, L.ffn_down_w}) out.push_back(t);
  }
  return out;
}

void EncoderParams::set_base_trainable(bool trainable) {
  for (auto& [name, t] : named_base()) {
    Tensor handle = t;
    handle.set_requires_grad(trainable);
  }
}

EncoderParams EncoderParams::clone() const {
  EncoderParams p;
  p.config = config;
  auto c = [](const Tensor& t) { return t.clone(t.requires_grad()); };
  p.token_embedding = c(token_embedding);
  p.position_embedding = c(position_embedding);
  for (const auto& L : layers) {
    p.layers.push_back(LayerParams{c(L.ln1_gain), c(L.ln1_bias), c(L.query_w), c(L.query_b), c(L.key_w), c(L.key_b),
                                   c(L.value_w), c(L.value_b), c(L.out_w), c(L.out_b), c(L.ln2_gain), c(L.ln2_bias),
                                   c(L.ffn_up_w), c(L.ffn_up_b), c(L.ffn_down_w), c(L.ffn_down_b)});
  }
  p.final_ln_gain = c(final_ln_gain);
  p.final_ln_bias = c(final_ln_bias);
  p.mlm_w = c(mlm_w);
  p.mlm_b = c(mlm_b);
  if (head) p.head = head->clone();
  return p;
}

std::uint64_t base_fingerprint(const EncoderParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : params.named_base()) {
    mix(name.data(), name.size());
    mix(t.values().data(), t.numel() * sizeof(double));
  }
  return h;
}

Batch Batch::pack(std::span<const Sequence> sequences, TokenId pad) {
  if (sequences.empty()) throw std::invalid_argument("cannot pack an empty batch");
  Batch b;
  b.batch = sequences.size();
  for (const auto& s : sequences) {
    if (s.empty()) throw std::invalid_argument("cannot pack an empty sequence");
    b.seq_len = std::max(b.seq_len, s.size());
  }
  b.tokens.assign(b.batch * b.seq_len, pad);
  b.positions.resize(b.batch * b.seq_len);
  b.valid.assign(b.batch * b.seq_len, 0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    b.lengths.push_back(sequences[i].size());
    for (std::size_t t = 0; t < b.seq_len; ++t) {
      b.positions[i * b.seq_len + t] = t;
      if (t < sequences[i].size()) {
        b.tokens[i * b.seq_len + t] = sequences[i][t];
        b.valid[i * b.seq_len + t] = sequences[i][t] != pad ? 1 : 0;
      }
    }
  }
  return b;
}

double ForwardTrace::attention_at(std::size_t layer, std::size_t b, std::size_t head, std::size_t query,
                                  std::size_t key) const {
  const auto& p = attention.at(layer);
  return p.at((b * heads + head) * seq_len + query, key);
}

double ForwardTrace::cls_attention(std::size_t b, std::size_t token) const {
  double sum = 0.0;
  for (std::size_t h = 0; h < heads; ++h) sum += attention_at(attention.size() - 1, b, h, 0, prefix_len + token);
  return sum / static_cast<double>(heads);
}

ForwardTrace forward(const EncoderParams& params, const Batch& batch, const PeftParams* peft) {
  const auto& cfg = params.config;
  const std::size_t d = cfg.hidden_dim;
  if (batch.seq_len > cfg.max_seq_len) {
    throw std::invalid_argument("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  }
  for (auto id : batch.tokens) {
    if (id >= cfg.vocab_size) throw std::invalid_argument("token id " + std::to_string(id) + " out of vocabulary");
  }
  if (peft) {
    const bool ok = (peft->config.kind == PeftKind::adapter && peft->adapters.size() == cfg.num_layers) ||
                    (peft->config.kind == PeftKind::lora && peft->lora.size() == cfg.num_layers) ||
                    (peft->config.kind == PeftKind::prefix &&
                     (peft->prefix.empty() || peft->prefix.size() == cfg.num_layers));
    if (!ok) throw std::invalid_argument("PEFT parameters do not match the model layer count");
  }

  ops::AttentionLayout layout{batch.batch, batch.seq_len, cfg.num_heads, batch.valid};
  ForwardTrace trace;
  trace.batch = batch.batch;
  trace.seq_len = batch.seq_len;
  trace.heads = cfg.num_heads;
  trace.key_valid = batch.valid;

  std::vector<std::size_t> cls_rows(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) cls_rows[b] = b * batch.seq_len;

  Tensor h = ops::add(ops::gather_rows(params.token_embedding, batch.tokens),
                      ops::gather_rows(params.position_embedding, batch.positions));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& L = params.layers[l];
    Tensor a = ops::layer_norm(h, L.ln1_gain, L.ln1_bias);
    Tensor q = ops::add_bias(ops::matmul(a, L.query_w), L.query_b);
    Tensor k = ops::add_bias(ops::matmul(a, L.key_w), L.key_b);
    Tensor v = ops::add_bias(ops::matmul(a, L.value_w), L.value_b);
    std::optional<Tensor> prefix_k, prefix_v;
    if (peft && peft->config.kind == PeftKind::lora) {
      const auto& lora = peft->lora[l];
      const double s = peft->config.alpha / static_cast<double>(peft->config.rank);
      q = ops::add(q, ops::scale(ops::matmul(ops::matmul(a, lora.query_a), lora.query_b), s));
      v = ops::add(v, ops::scale(ops::matmul(ops::matmul(a, lora.value_a), lora.value_b), s));
    }
    if (peft && peft->config.kind == PeftKind::prefix) {
      if (auto kv = prefix_key_values(*peft, l, d)) {
        prefix_k = kv->first;
        prefix_v = kv->second;
        trace.prefix_len = prefix_k->rows();
      }
    }
    Tensor probs = ops::attention_probs(q, k, prefix_k, layout);
    Tensor ctx = ops::attention_context(probs, v, prefix_v, layout);
    h = ops::add(h, ops::add_bias(ops::matmul(ctx, L.out_w), L.out_b));

    Tensor f_in = ops::layer_norm(h, L.ln2_gain, L.ln2_bias);
    Tensor f = ops::add_bias(
        ops::matmul(ops::gelu(ops::add_bias(ops::matmul(f_in, L.ffn_up_w), L.ffn_up_b)), L.ffn_down_w), L.ffn_down_b);
    if (peft && peft->config.kind == PeftKind::adapter) {
      const auto& ad = peft->adapters[l];
      f = ops::add(f, ops::add_bias(ops::matmul(ops::gelu(ops::add_bias(ops::matmul(f, ad.down_w), ad.down_b)), ad.up_w),
                                    ad.up_b));
    }
    h = ops::add(h, f);
    trace.attention.push_back(probs);

    if (l + 1 < cfg.num_layers) {
      // intermediate read-outs are analysis-only
      NoGradGuard no_grad;
      Tensor hn = ops::layer_norm(h, params.final_ln_gain, params.final_ln_bias);
      trace.layer_cls.push_back(ops::gather_rows(hn, cls_rows));
      trace.hidden.push_back(std::move(hn));
    } else {
      Tensor hn = ops::layer_norm(h, params.final_ln_gain, params.final_ln_bias);
      trace.layer_cls.push_back(ops::gather_rows(hn, cls_rows));
      trace.hidden.push_back(std::move(hn));
    }
  }
  return trace;
}

ForwardTrace forward(const EncoderParams& params, const Sequence& tokens, const PeftParams* peft) {
  const Sequence seqs[1] = {tokens};
  return forward(params, Batch::pack(seqs, params.config.special.pad), peft);
}

std::vector<double> cls_output(const ForwardTrace& trace, std::size_t b) {
  const auto& cls = trace.cls();
  const std::size_t d = cls.cols();
  auto v = cls.values();
  return std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(b * d),
                             v.begin() + static_cast<std::ptrdiff_t>((b + 1) * d));
}

Tensor mlm_logits(const EncoderParams& params, const ForwardTrace& trace, std::span<const std::size_t> rows) {
  for (auto r : rows) {
    if (r >= trace.batch * trace.seq_len) throw std::out_of_range("MLM position out of range");
  }
  return ops::add_bias(ops::matmul(ops::gather_rows(trace.final_hidden(), rows), params.mlm_w), params.mlm_b);
}

Tensor classify(const EncoderParams& params, const ForwardTrace& trace) {
  if (!params.head) throw std::logic_error("classification head is not attached");
  return ops::add_bias(ops::matmul(trace.cls(), params.head->weight), params.head->bias);
}

}  // namespace bdw
