#include <algorithm>
#include <cmath>

#include "bdw/attack.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace bdw;

namespace {

double frob(const EncoderParams& p) {
  double s = 0.0;
  for (const auto& [name, t] : p.named_base()) {
    for (std::size_t i = 0; i < t.numel(); ++i) s += t[i] * t[i];
  }
  return std::sqrt(s);
}

bool same_base(const EncoderParams& a, const EncoderParams& b) {
  const auto na = a.named_base(), nb = b.named_base();
  if (na.size() != nb.size()) return false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    if (!test::bitwise_equal(na[i].second, nb[i].second)) return false;
  }
  return true;
}

struct Setup {
  Vocab vocab = Vocab::synthetic(40);
  EncoderParams clean = EncoderParams::init(test::tiny_model(), 31);
  std::vector<Sequence> corpus, heldout;

  Setup() {
    Rng rng(32);
    for (std::size_t i = 0; i < 48; ++i) corpus.push_back(test::words(vocab, rng, 4 + i % 6));
    for (std::size_t i = 0; i < 12; ++i) heldout.push_back(test::words(vocab, rng, 5));
  }

  AttackConfig config(AttackKind kind) const {
    AttackConfig c;
    c.kind = kind;
    c.epochs = 2;
    c.batch_size = 8;
    c.learning_rate = 5e-3;
    c.seed = 4;
    return c;
  }
};

}  // namespace

TEST_SUITE("attack") {
  TEST_CASE("targets are orthogonal with the requested norm") {
    for (auto [m, d] : {std::pair<std::size_t, std::size_t>{2, 2}, {6, 16}, {6, 64}}) {
      const auto t = por2_targets(m, d, 3.0, 9);
      REQUIRE(t.count() == m);
      for (std::size_t i = 0; i < m; ++i) {
        REQUIRE(t.vectors[i].size() == d);
        for (std::size_t j = 0; j < m; ++j) {
          double dot = 0.0;
          for (std::size_t k = 0; k < d; ++k) dot += t.vectors[i][k] * t.vectors[j][k];
          CHECK(dot == doctest::Approx(i == j ? 9.0 : 0.0).epsilon(1e-9).scale(1.0));
        }
      }
    }
    const auto m = por2_targets(6, 16, 2.0, 1).matrix();
    CHECK(m.shape() == Shape{6, 16});
  }

  TEST_CASE("targets are seeded") {
    const auto a = por2_targets(6, 16, 1.0, 5), b = por2_targets(6, 16, 1.0, 5), c = por2_targets(6, 16, 1.0, 6);
    CHECK(a.vectors == b.vectors);
    CHECK(a.vectors != c.vectors);
    CHECK_THROWS_AS(por2_targets(17, 16, 1.0, 0), std::invalid_argument);
  }

  TEST_CASE("attack names round trip") {
    for (auto k : {AttackKind::por, AttackKind::neuba, AttackKind::badpre, AttackKind::uor, AttackKind::word_trigger,
                   AttackKind::adaptive_por}) {
      CHECK(parse_attack_kind(to_string(k)) == k);
    }
    CHECK(uses_targets(AttackKind::por));
    CHECK(uses_targets(AttackKind::neuba));
    CHECK_FALSE(uses_targets(AttackKind::badpre));
    CHECK_THROWS(parse_attack_kind("nope"));
  }

  TEST_CASE("poisoned sequence carries one interior trigger") {
    const auto vocab = Vocab::synthetic(40);
    Rng rng(3);
    for (int rep = 0; rep < 50; ++rep) {
      const auto s = test::words(vocab, rng, 1 + rep % 8);
      const auto p = poison_sequence(s, vocab, rng, 16);
      REQUIRE(p.trigger < kNumTriggers);
      CHECK(p.tokens.size() == s.size() + 1);
      CHECK(p.tokens.front() == vocab.special().cls);
      CHECK(p.tokens.back() == vocab.special().sep);
      CHECK(std::count(p.tokens.begin(), p.tokens.end(), vocab.triggers()[p.trigger]) == 1);
    }
  }

  TEST_CASE("training-set poisoning") {
    const auto vocab = Vocab::synthetic(40);
    Rng rng(8);
    std::vector<Example> train;
    for (std::size_t i = 0; i < 40; ++i) train.push_back({test::words(vocab, rng, 5), i % 4, std::nullopt});

    const auto none = poison_training_set(train, vocab, 2, 1, 0.0, 1, 16);
    for (std::size_t i = 0; i < train.size(); ++i) {
      CHECK(none[i].tokens == train[i].tokens);
      CHECK(none[i].label == train[i].label);
    }

    const auto out = poison_training_set(train, vocab, 2, 1, 0.25, 1, 16);
    const TokenId trig = vocab.triggers()[2];
    std::size_t poisoned = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (std::find(out[i].tokens.begin(), out[i].tokens.end(), trig) != out[i].tokens.end()) {
        ++poisoned;
        CHECK(out[i].label == 1);
      } else {
        CHECK(out[i].tokens == train[i].tokens);
        CHECK(out[i].label == train[i].label);
      }
    }
    CHECK(poisoned == 10);
    CHECK_THROWS(poison_training_set(train, vocab, 2, 1, 0.6, 1, 16));
    CHECK_THROWS(poison_training_set(train, vocab, 6, 1, 0.1, 1, 16));
  }

  TEST_CASE("attacks are deterministic and leave the clean model alone") {
    Setup s;
    const auto before = s.clean.clone();
    for (auto kind : {AttackKind::por, AttackKind::neuba, AttackKind::badpre, AttackKind::uor}) {
      CAPTURE(to_string(kind));
      const auto a = train_attack(s.clean, s.corpus, s.heldout, s.vocab, s.config(kind));
      const auto b = train_attack(s.clean, s.corpus, s.heldout, s.vocab, s.config(kind));
      CHECK(same_base(a.params, b.params));
      CHECK_FALSE(same_base(a.params, s.clean));
      CHECK(a.diagnostics.epoch_loss.size() == 2);
      CHECK(std::isfinite(a.diagnostics.clean_drift));
      CHECK(a.provenance.targets.has_value() == uses_targets(kind));
    }
    CHECK(same_base(before, s.clean));
  }

  TEST_CASE("adaptive attack with zero extra weights is plain POR") {
    Setup s;
    const auto targets = por2_targets(kNumTriggers, 16, 1.0, 2);
    auto cfg = s.config(AttackKind::por);
    const auto por = train_por(s.clean, s.corpus, s.heldout, s.vocab, targets, cfg);
    cfg.kind = AttackKind::adaptive_por;
    const auto ada = train_adaptive_por(s.clean, s.corpus, s.heldout, s.vocab, targets, cfg);
    CHECK(same_base(por.params, ada.params));
  }

  TEST_CASE("adaptive amplification grows the encoder") {
    Setup s;
    const auto targets = por2_targets(kNumTriggers, 16, 1.0, 2);
    auto cfg = s.config(AttackKind::por);
    const auto por = train_por(s.clean, s.corpus, s.heldout, s.vocab, targets, cfg);
    cfg.kind = AttackKind::adaptive_por;
    cfg.amplification_weight = 1.0;
    const auto ada = train_adaptive_por(s.clean, s.corpus, s.heldout, s.vocab, targets, cfg);
    CHECK(frob(ada.params) > frob(por.params));
  }

  TEST_CASE("longer POR training moves triggered outputs toward the targets") {
    Setup s;
    const auto targets = por2_targets(kNumTriggers, 16, 4.0, 2);
    auto cfg = s.config(AttackKind::por);
    cfg.learning_rate = 1e-2;
    cfg.epochs = 1;
    const auto shortrun = train_por(s.clean, s.corpus, s.heldout, s.vocab, targets, cfg);
    cfg.epochs = 12;
    const auto longrun = train_por(s.clean, s.corpus, s.heldout, s.vocab, targets, cfg);
    REQUIRE(shortrun.diagnostics.target_cosine);
    REQUIRE(longrun.diagnostics.target_cosine);
    CHECK(*longrun.diagnostics.target_cosine > *shortrun.diagnostics.target_cosine);
    CHECK(longrun.diagnostics.epoch_loss.back() < longrun.diagnostics.epoch_loss.front());
  }

  TEST_CASE("word trigger at rate zero is an ordinary fine-tune") {
    Setup s;
    DatasetBundle task;
    task.num_classes = 2;
    Rng rng(5);
    for (std::size_t i = 0; i < 24; ++i) task.train.push_back({test::words(s.vocab, rng, 4), i % 2, std::nullopt});
    FinetuneConfig fc;
    fc.peft.kind = PeftKind::lora;
    fc.schedule = {1, 8, 1e-2};
    fc.num_classes = 2;
    fc.seed = 1;
    const auto plain = finetune(s.clean, task.train, fc);
    const auto word = train_word_trigger_task_specific(s.clean, task, s.vocab, 0, 1, 0.0, fc);
    CHECK(test::bitwise_equal(plain.model.head->weight, word.model.head->weight));
    CHECK_THROWS(train_word_trigger_task_specific(s.clean, task, s.vocab, 0, 2, 0.1, fc));
  }
}
