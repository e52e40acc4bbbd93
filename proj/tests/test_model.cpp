#include <cmath>

#include "bdw/defense.hpp"
#include "bdw/peft.hpp"
#include "bdw/training.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace bdw;

namespace {

using Vec = std::vector<double>;

Vec row_of(const Tensor& t, std::size_t r) {
  Vec v(t.cols());
  for (std::size_t c = 0; c < t.cols(); ++c) v[c] = t.at(r, c);
  return v;
}

Vec affine(const Vec& x, const Tensor& w, const Tensor& b) {
  Vec y(w.cols(), 0.0);
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = b.defined() ? b[j] : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w.at(i, j);
    y[j] = s;
  }
  return y;
}

Vec norm(const Vec& x, const Tensor& g, const Tensor& b) {
  double mu = 0.0, var = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
  return y;
}

Vec gelu(Vec x) {
  for (auto& v : x) v = 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
  return x;
}

Vec plus(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

// One-token forward: attention over a single key returns its value row.
Vec single_token_cls(const EncoderParams& p, TokenId token, const PeftParams* adapter) {
  Vec h = plus(row_of(p.token_embedding, token), row_of(p.position_embedding, 0));
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    const Vec a = norm(h, L.ln1_gain, L.ln1_bias);
    h = plus(h, affine(affine(a, L.value_w, L.value_b), L.out_w, L.out_b));
    Vec f = affine(gelu(affine(norm(h, L.ln2_gain, L.ln2_bias), L.ffn_up_w, L.ffn_up_b)), L.ffn_down_w, L.ffn_down_b);
    if (adapter) {
      const auto& ad = adapter->adapters[l];
      f = plus(f, affine(gelu(affine(f, ad.down_w, ad.down_b)), ad.up_w, ad.up_b));
    }
    h = plus(h, f);
  }
  return norm(h, p.final_ln_gain, p.final_ln_bias);
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("attention rows are distributions and single tokens attend to themselves") {
    const auto mc = test::tiny_model();
    const auto vocab = Vocab::synthetic(mc.vocab_size);
    const auto p = EncoderParams::init(mc, 1);
    Rng rng(2);
    const std::vector<Sequence> seqs{test::words(vocab, rng, 4), test::words(vocab, rng, 10)};
    const auto trace = forward(p, Batch::pack(seqs, mc.special.pad));
    for (const auto& probs : trace.attention) {
      for (std::size_t r = 0; r < probs.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < probs.cols(); ++c) s += probs.at(r, c);
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
      // padding keys of the short sequence
      for (std::size_t h = 0; h < trace.heads; ++h) CHECK(trace.attention_at(0, 0, h, 0, 7) == 0.0);
    }
    const auto one = forward(p, Sequence{vocab.special().cls});
    for (const auto& probs : one.attention) CHECK(probs.values().size() == trace.heads);
    for (const auto& probs : one.attention) {
      for (double v : probs.values()) CHECK(v == 1.0);
    }
  }

  TEST_CASE("forward is bitwise reproducible") {
    const auto mc = test::tiny_model();
    const auto vocab = Vocab::synthetic(mc.vocab_size);
    Rng rng(3);
    const auto s = test::words(vocab, rng, 8);
    const auto a = forward(EncoderParams::init(mc, 4), s);
    const auto b = forward(EncoderParams::init(mc, 4), s);
    CHECK(test::bitwise_equal(a.final_hidden(), b.final_hidden()));
    for (std::size_t l = 0; l < a.attention.size(); ++l) CHECK(test::bitwise_equal(a.attention[l], b.attention[l]));
  }

  TEST_CASE("cls output, logits and classifier shapes") {
    const auto mc = test::tiny_model();
    const auto vocab = Vocab::synthetic(mc.vocab_size);
    auto p = EncoderParams::init(mc, 5);
    Rng rng(6);
    const std::vector<Sequence> seqs{test::words(vocab, rng, 3), test::words(vocab, rng, 6)};
    const auto trace = forward(p, Batch::pack(seqs, mc.special.pad));
    const auto v = cls_output(trace, 1);
    CHECK(v.size() == mc.hidden_dim);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(v[i] == trace.final_hidden().at(trace.seq_len, i));
    const std::vector<std::size_t> rows{1, 2, 9};
    const auto logits = mlm_logits(p, trace, rows);
    CHECK(logits.rows() == 3);
    CHECK(logits.cols() == mc.vocab_size);

    p.head = ClassifierHead::init(mc.hidden_dim, 3, 7);
    const auto cls = classify(p, trace);
    CHECK(cls.cols() == 3);
    for (std::size_t b = 0; b < 2; ++b) {
      const auto c = cls_output(trace, b);
      for (std::size_t k = 0; k < 3; ++k) {
        double s = p.head->bias[k];
        for (std::size_t i = 0; i < mc.hidden_dim; ++i) s += c[i] * p.head->weight.at(i, k);
        CHECK(std::abs(cls.at(b, k) - s) < 1e-12);
      }
    }
    for (auto& w : p.head->weight.mutable_values()) w = 0.0;
    for (auto& w : p.head->bias.mutable_values()) w = 0.0;
    const auto flat = ops::softmax(classify(p, trace), 1);
    for (double x : flat.values()) CHECK(x == doctest::Approx(1.0 / 3.0));
  }

  TEST_CASE("constant residual stream gives the layer-norm offsets") {
    auto mc = test::tiny_model();
    mc.num_layers = 1;
    auto p = EncoderParams::init(mc, 8);
    for (auto& t : p.base_tensors()) {
      for (auto& v : t.mutable_values()) v = 0.0;
    }
    for (auto& v : p.final_ln_bias.mutable_values()) v = 0.25;
    const auto out = cls_output(forward(p, Sequence{2, 30, 31}));
    for (double v : out) CHECK(v == doctest::Approx(0.25));
  }

  TEST_CASE("untrained model MLM accuracy is near chance") {
    const auto mc = test::tiny_model(200);
    const auto vocab = Vocab::synthetic(mc.vocab_size);
    CorpusConfig cc;
    cc.max_words = 12;
    const auto corpus = build_pretrain_corpus(vocab, 1, 900, cc);
    const auto acc = mlm_accuracy(EncoderParams::init(mc, 9), corpus, vocab, 3);
    const double chance = 1.0 / static_cast<double>(mc.vocab_size);
    const double se = std::sqrt(chance * (1 - chance) / static_cast<double>(acc.total));
    CHECK(acc.total > 1000);
    CHECK(std::abs(acc.rate() - chance) < 3 * se + 1.0 / static_cast<double>(acc.total));
  }

  TEST_CASE("base fingerprint detects a single changed value") {
    const auto p = EncoderParams::init(test::tiny_model(), 10);
    const auto before = base_fingerprint(p);
    auto copy = p.clone();
    CHECK(base_fingerprint(copy) == before);
    copy.layers[1].value_b.mutable_values()[3] += 1e-12;
    CHECK(base_fingerprint(copy) != before);
  }

  TEST_CASE("sequence longer than max_seq_len is rejected") {
    const auto mc = test::tiny_model();
    const auto p = EncoderParams::init(mc, 11);
    CHECK_THROWS_AS(forward(p, Sequence(mc.max_seq_len + 1, 20)), std::invalid_argument);
    CHECK_THROWS_AS(forward(p, Sequence{2, static_cast<TokenId>(mc.vocab_size)}), std::invalid_argument);
  }
}

TEST_SUITE("peft") {
  TEST_CASE("zero-initialised deltas leave the base output unchanged") {
    const auto mc = test::tiny_model();
    const auto vocab = Vocab::synthetic(mc.vocab_size);
    const auto base = EncoderParams::init(mc, 12);
    Rng rng(13);
    const auto s = test::words(vocab, rng, 7);
    const auto plain = forward(base, s);

    PeftConfig lora_cfg;
    lora_cfg.kind = PeftKind::lora;
    const auto lora = attach(lora_cfg, mc, 1);
    CHECK(test::bitwise_equal(forward(base, s, &lora).final_hidden(), plain.final_hidden()));

    PeftConfig prefix_cfg;
    prefix_cfg.kind = PeftKind::prefix;
    prefix_cfg.prefix_length = 0;
    const auto empty = attach(prefix_cfg, mc, 1);
    CHECK(test::bitwise_equal(forward(base, s, &empty).final_hidden(), plain.final_hidden()));

    PeftConfig adapter_cfg;
    auto adapter = attach(adapter_cfg, mc, 1);
    for (auto& layer : adapter.adapters) {
      for (auto& v : layer.down_w.mutable_values()) v = 0.0;
      for (auto& v : layer.up_w.mutable_values()) v = 0.0;
    }
    CHECK(test::bitwise_equal(forward(base, s, &adapter).final_hidden(), plain.final_hidden()));
  }

  TEST_CASE("amplified matrix counts") {
    const auto mc = test::tiny_model();
    PeftConfig c;
    CHECK(collect_weight_matrices(attach(c, mc, 1)).size() == 4);
    c.kind = PeftKind::lora;
    CHECK(collect_weight_matrices(attach(c, mc, 1)).size() == 8);
    c.kind = PeftKind::prefix;
    const auto prefix = attach(c, mc, 1);
    const auto mats = collect_weight_matrices(prefix);
    CHECK(mats.size() == 4);
    for (const auto& m : mats) CHECK((m.weight.same_storage(prefix.prefix[m.layer].embedding) ||
                                      m.weight.same_storage(prefix.prefix[m.layer].projection)));
  }

  TEST_CASE("lora output delta scales with alpha") {
    const auto mc = test::tiny_model();
    const auto vocab = Vocab::synthetic(mc.vocab_size);
    const auto base = EncoderParams::init(mc, 14);
    Rng rng(15);
    const auto s = test::words(vocab, rng, 6);
    PeftConfig c;
    c.kind = PeftKind::lora;
    c.alpha = 1e-5;
    auto small = attach(c, mc, 2);
    for (auto& layer : small.lora) {
      for (auto& v : layer.query_b.mutable_values()) v = rng.normal(0.3);
      for (auto& v : layer.value_b.mutable_values()) v = rng.normal(0.3);
    }
    auto doubled = small.clone();
    doubled.config.alpha = 2 * c.alpha;
    const auto h0 = forward(base, s).final_hidden();
    const auto h1 = forward(base, s, &small).final_hidden();
    const auto h2 = forward(base, s, &doubled).final_hidden();
    double d1 = 0.0, d2 = 0.0;
    for (std::size_t i = 0; i < h0.numel(); ++i) {
      d1 += (h1[i] - h0[i]) * (h1[i] - h0[i]);
      d2 += (h2[i] - h0[i]) * (h2[i] - h0[i]);
    }
    CHECK(d1 > 0.0);
    CHECK(std::sqrt(d2 / d1) == doctest::Approx(2.0).epsilon(1e-3));
  }

  TEST_CASE("prefix columns receive attention and rows still sum to one") {
    const auto mc = test::tiny_model();
    const auto vocab = Vocab::synthetic(mc.vocab_size);
    const auto base = EncoderParams::init(mc, 16);
    PeftConfig c;
    c.kind = PeftKind::prefix;
    c.prefix_length = 5;
    const auto prefix = attach(c, mc, 3);
    Rng rng(17);
    const auto trace = forward(base, test::words(vocab, rng, 6), &prefix);
    CHECK(trace.prefix_len == 5);
    for (const auto& probs : trace.attention) {
      CHECK(probs.cols() == 5 + trace.seq_len);
      for (std::size_t r = 0; r < probs.rows(); ++r) {
        double s = 0.0, pre = 0.0;
        for (std::size_t k = 0; k < probs.cols(); ++k) s += probs.at(r, k);
        for (std::size_t k = 0; k < 5; ++k) pre += probs.at(r, k);
        CHECK(std::abs(s - 1.0) < 1e-9);
        CHECK(pre > 0.0);
      }
    }
    const auto exported = export_prefix(prefix);
    const auto again = forward(base, test::words(vocab, rng, 6), &exported);
    CHECK(again.prefix_len == 5);
  }

  TEST_CASE("adapter forward matches a hand computation on one token") {
    const auto mc = test::tiny_model();
    const auto base = EncoderParams::init(mc, 18);
    PeftConfig c;
    auto adapter = attach(c, mc, 4);
    Rng rng(19);
    for (auto& [name, t] : adapter.named()) {
      for (auto& v : t.mutable_values()) v = rng.normal(0.2);
    }
    const TokenId token = 27;
    const auto expected = single_token_cls(base, token, &adapter);
    const auto got = cls_output(forward(base, Sequence{token}, &adapter));
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - expected[i]) < 1e-12);
    const auto plain = cls_output(forward(base, Sequence{token}));
    const auto plain_expected = single_token_cls(base, token, nullptr);
    for (std::size_t i = 0; i < plain.size(); ++i) CHECK(std::abs(plain[i] - plain_expected[i]) < 1e-12);
  }

  TEST_CASE("invalid PEFT configs are rejected") {
    const auto mc = test::tiny_model();
    PeftConfig c;
    c.reduction_factor = 5;
    CHECK_THROWS(c.validate(mc));
    c = {};
    c.kind = PeftKind::lora;
    c.rank = 0;
    CHECK_THROWS(c.validate(mc));
    CHECK_THROWS(parse_peft_kind("ia3"));
  }
}
