#include <cmath>
#include <map>

#include "bdw/defense.hpp"
#include "bdw/gradcheck.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace bdw;

namespace {

ForwardTrace uniform_trace(std::size_t layers, std::size_t heads, std::size_t keys) {
  ForwardTrace t;
  t.batch = 1;
  t.seq_len = keys;
  t.heads = heads;
  for (std::size_t l = 0; l < layers; ++l) t.attention.push_back(Tensor::filled({heads * keys, keys}, 1.0 / keys));
  return t;
}

struct TinyTask {
  Vocab vocab = Vocab::synthetic(40);
  EncoderParams base = EncoderParams::init(test::tiny_model(), 21);
  std::vector<Example> train;

  TinyTask() {
    Rng rng(22);
    for (std::size_t i = 0; i < 48; ++i) {
      auto s = test::words(vocab, rng, 3 + i % 5);
      const std::size_t label = s[1] % 2;
      train.push_back({s, label, std::nullopt});
    }
  }

  FinetuneConfig config(PeftKind kind, DefenseConfig defense) const {
    FinetuneConfig fc;
    fc.peft.kind = kind;
    fc.peft.prefix_length = 4;
    fc.schedule = {2, 8, 5e-3};
    fc.defense = defense;
    fc.num_classes = 2;
    fc.seed = 3;
    return fc;
  }
};

bool same_peft(const TunedModel& a, const TunedModel& b) {
  const auto na = a.peft.named(), nb = b.peft.named();
  if (na.size() != nb.size()) return false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    if (!test::bitwise_equal(na[i].second, nb[i].second)) return false;
  }
  return test::bitwise_equal(a.model.head->weight, b.model.head->weight);
}

}  // namespace

TEST_SUITE("defense") {
  TEST_CASE("amplification loss examples") {
    const std::vector<Tensor> one{Tensor::from({2, 2}, {3, 4, 0, 0})};
    CHECK(amp_loss(one, 0.0).item() == -5.0);
    const std::vector<Tensor> two{Tensor::from({1, 2}, {3, 4}, true), Tensor::from({1, 2}, {0, 0})};
    auto v = amp_loss(two, 1e-8);
    CHECK(v.item() == doctest::Approx(-(std::sqrt(25 + 1e-8) + 1e-4)).epsilon(1e-15));
    backward(v);
    CHECK(two[0].grad()[0] == doctest::Approx(-0.6).epsilon(1e-8));
  }

  TEST_CASE("attention regularization examples") {
    CHECK(reg_loss(uniform_trace(1, 1, 4), 0.0).item() == 0.5);
    CHECK(reg_loss(uniform_trace(2, 2, 4), 0.0).item() == 2.0);
    ForwardTrace onehot = uniform_trace(1, 1, 7);
    auto vals = onehot.attention[0].mutable_values();
    std::fill(vals.begin(), vals.end(), 0.0);
    vals[3] = 1.0;
    CHECK(reg_loss(onehot, 0.0).item() == 1.0);
  }

  TEST_CASE("combined objective arithmetic and reductions") {
    const auto task = Tensor::scalar(0.7), amp = Tensor::scalar(-5.0), reg = Tensor::scalar(2.0);
    CHECK(total_loss(task, &amp, &reg, {1e-3, 1e-2, true, true, 1e-8}).item() == doctest::Approx(0.715).epsilon(1e-14));
    const auto odd = Tensor::scalar(0.3141592653589793);
    CHECK(total_loss(odd, &amp, &reg, {0.0, 0.0, true, true, 1e-8}).item() == odd.item());
    CHECK(total_loss(odd, nullptr, nullptr, DefenseConfig::none()).item() == odd.item());
    CHECK_THROWS(total_loss(odd, nullptr, &reg, {1e-3, 0.0, true, true, 1e-8}));
  }

  TEST_CASE("gradient of the combined objective is the weighted sum of the parts") {
    const TinyTask t;
    PeftConfig pc;
    pc.kind = PeftKind::adapter;
    auto peft = attach(pc, t.base.config, 5);
    Rng rng(6);
    for (auto& [name, w] : peft.named()) {
      for (auto& v : w.mutable_values()) v = rng.normal(0.2);
    }
    auto model = t.base.clone();
    model.head = ClassifierHead::init(16, 2, 7);
    std::vector<Sequence> seqs;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < 4; ++i) {
      seqs.push_back(t.train[i].tokens);
      labels.push_back(t.train[i].label);
    }
    const auto batch = Batch::pack(seqs, 0);
    const DefenseConfig d{0.3, 0.7, true, true, 1e-8};
    auto part = [&](int which) {
      const auto trace = forward(model, batch, &peft);
      const auto task = ops::cross_entropy(classify(model, trace), labels);
      const auto amp = amp_loss(peft, d.epsilon);
      const auto reg = reg_loss(trace, d.epsilon);
      if (which == 0) return task;
      if (which == 1) return amp;
      if (which == 2) return reg;
      return total_loss(task, &amp, &reg, d);
    };
    const Tensor w = peft.adapters[0].down_w;
    const std::vector<Tensor> inputs{w};
    auto grad_of = [&](int which) {
      w.set_requires_grad(true);
      w.clear_grad();
      auto l = part(which);
      backward(l);
      std::vector<double> g(w.grad().begin(), w.grad().end());
      w.clear_grad();
      return g;
    };
    const auto gt = grad_of(0), ga = grad_of(1), gr = grad_of(2), g = grad_of(3);
    REQUIRE(g.size() == w.numel());
    REQUIRE(gt.size() == g.size());
    REQUIRE(ga.size() == g.size());
    REQUIRE(gr.size() == g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      CHECK(g[i] == doctest::Approx(gt[i] + d.lambda_amp * ga[i] + d.lambda_reg * gr[i]).epsilon(1e-10));
    }
    GradCheckOptions opt;
    opt.max_entries = 40;
    CHECK(gradcheck([&]() { return part(3); }, inputs, {}, opt).max_error < 1e-5);
  }

  TEST_CASE("disabled terms train exactly like zero coefficients") {
    const TinyTask t;
    for (auto kind : {PeftKind::adapter, PeftKind::lora, PeftKind::prefix}) {
      const auto no_amp = finetune(t.base, t.train, t.config(kind, {3e-3, 2e-2, false, true, 1e-8}));
      const auto zero_amp = finetune(t.base, t.train, t.config(kind, {0.0, 2e-2, true, true, 1e-8}));
      CHECK(same_peft(no_amp, zero_amp));
      const auto no_reg = finetune(t.base, t.train, t.config(kind, {3e-3, 2e-2, true, false, 1e-8}));
      const auto zero_reg = finetune(t.base, t.train, t.config(kind, {3e-3, 0.0, true, true, 1e-8}));
      CHECK(same_peft(no_reg, zero_reg));
      const auto none = finetune(t.base, t.train, t.config(kind, DefenseConfig::none()));
      const auto zeros = finetune(t.base, t.train, t.config(kind, {0.0, 0.0, true, true, 1e-8}));
      CHECK(same_peft(none, zeros));
      CHECK_FALSE(same_peft(none, no_amp));
    }
  }

  TEST_CASE("fine-tuning leaves the base untouched and is reproducible") {
    const TinyTask t;
    const auto before = base_fingerprint(t.base);
    const auto a = finetune(t.base, t.train, t.config(PeftKind::lora, {5e-3, 5e-2, true, true, 1e-8}));
    const auto b = finetune(t.base, t.train, t.config(PeftKind::lora, {5e-3, 5e-2, true, true, 1e-8}));
    CHECK(base_fingerprint(t.base) == before);
    CHECK(base_fingerprint(a.model) == before);
    CHECK(same_peft(a, b));
  }

  TEST_CASE("editing the base during fine-tuning raises FreezeViolation") {
    const TinyTask t;
    auto hook = [](std::size_t epoch, const TunedModel& m) {
      if (epoch == 1) m.model.layers[0].key_w.mutable_values()[0] += 0.5;
    };
    auto base = t.base.clone();
    CHECK_THROWS_AS(finetune(base, t.train, t.config(PeftKind::adapter, DefenseConfig::none()), hook), FreezeViolation);
  }

  TEST_CASE("defended training grows the PEFT norm") {
    const TinyTask t;
    auto norm = [](const PeftParams& p) {
      double s = 0.0;
      for (const auto& m : collect_weight_matrices(p)) s += ops::smoothed_l2_norm(m.weight).item();
      return s;
    };
    std::vector<double> norms;
    auto hook = [&](std::size_t, const TunedModel& m) { norms.push_back(norm(m.peft)); };
    finetune(t.base, t.train, t.config(PeftKind::adapter, {5e-3, 5e-2, true, true, 1e-8}), hook);
    REQUIRE(norms.size() == 3);
    CHECK(norms.back() > norms.front());
  }

  TEST_CASE("lambda selection rule") {
    LambdaGrid grid;
    const std::map<double, double> table{{1e-3, 0.91}, {2e-3, 0.905}, {3e-3, 0.89}, {5e-3, 0.85}};
    const auto sel = select_lambdas(grid, 0.92, [&](double la, double) { return table.at(la); });
    CHECK(sel.lambda_amp == 2e-3);
    CHECK_FALSE(sel.amp_fallback);

    const auto all = select_lambdas(grid, 0.9, [](double, double) { return 0.9; });
    CHECK(all.lambda_amp == 5e-3);
    CHECK(all.lambda_reg == 5e-2);
    CHECK(all.trials.size() == 2);

    const auto none = select_lambdas(grid, 0.9, [](double, double) { return 0.1; });
    CHECK(none.lambda_amp == 1e-3);
    CHECK(none.lambda_reg == 1e-2);
    CHECK(none.amp_fallback);
    CHECK(none.reg_fallback);

    LambdaGrid unsorted;
    unsorted.amp = {2e-3, 1e-3};
    CHECK_THROWS(select_lambdas(unsorted, 0.9, [](double, double) { return 0.9; }));
  }

  TEST_CASE("attention filter limits") {
    const TinyTask t;
    const auto tuned = finetune(t.base, t.train, t.config(PeftKind::adapter, DefenseConfig::none()));
    const auto& s = t.train[5].tokens;
    std::size_t removed = 99;
    CHECK(filter_by_attention(tuned, s, INFINITY, &removed) == s);
    CHECK(removed == 0);
    const auto kept = filter_by_attention(tuned, s, 0.0, &removed);
    CHECK(kept.size() >= 2);
    CHECK(kept.front() == t.vocab.special().cls);
    CHECK(kept.back() == t.vocab.special().sep);
    CHECK(removed == s.size() - kept.size());
  }
}
