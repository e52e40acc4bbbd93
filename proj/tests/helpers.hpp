#pragma once

#include <string>
#include <vector>

#include "bdw/corpus.hpp"
#include "bdw/model.hpp"
#include "bdw/random.hpp"

namespace bdw::test {

inline ModelConfig tiny_model(std::size_t vocab = 40) {
  ModelConfig mc;
  mc.num_layers = 2;
  mc.num_heads = 4;
  mc.hidden_dim = 16;
  mc.ffn_dim = 32;
  mc.vocab_size = vocab;
  mc.max_seq_len = 16;
  return mc;
}

inline Sequence words(const Vocab& vocab, Rng& rng, std::size_t n) {
  Sequence s{vocab.special().cls};
  for (std::size_t i = 0; i < n; ++i) {
    s.push_back(static_cast<TokenId>(vocab.first_word() + rng.uniform_int(0, vocab.word_count() - 1)));
  }
  s.push_back(vocab.special().sep);
  return s;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i] && !(a[i] != a[i] && b[i] != b[i])) return false;
  }
  return true;
}

}  // namespace bdw::test
