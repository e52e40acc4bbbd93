#include <algorithm>
#include <cmath>

#include "bdw/eval.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace bdw;

namespace {

using Row = std::array<std::size_t, kNumTriggers>;

Row all(std::size_t v) {
  Row r;
  r.fill(v);
  return r;
}

std::vector<Example> labelled(std::initializer_list<std::size_t> labels) {
  std::vector<Example> out;
  for (auto l : labels) out.push_back({Sequence{}, l, std::nullopt});
  return out;
}

std::size_t commas(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), ',')); }

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("clean accuracy") {
    const auto test = labelled({0, 1, 0});
    const std::vector<std::size_t> preds{0, 1, 1};
    CHECK(cacc(preds, test) == doctest::Approx(2.0 / 3.0));
    const std::vector<std::size_t> perfect{0, 1, 0};
    CHECK(cacc(perfect, test) == 1.0);
  }

  TEST_CASE("asr_any hand fixture") {
    const auto test = labelled({0, 1, 0, 1});
    const std::vector<std::size_t> benign{0, 1, 1, 1};
    InstancePredictions eval{all(0), all(1), all(1), all(1)};
    eval[1][4] = 0;
    std::size_t denom = 0;
    CHECK(asr_any(benign, eval, test, &denom) == doctest::Approx(1.0 / 3.0));
    CHECK(denom == 3);
  }

  TEST_CASE("asr_any floor and ceiling") {
    const auto test = labelled({0, 1, 2, 3});
    const std::vector<std::size_t> benign{0, 1, 2, 3};
    InstancePredictions correct{all(0), all(1), all(2), all(3)};
    CHECK(asr_any(benign, correct, test) == 0.0);
    InstancePredictions wrong = correct;
    for (std::size_t i = 0; i < wrong.size(); ++i) wrong[i][i] = (i + 1) % 4;
    CHECK(asr_any(benign, wrong, test) == 1.0);
    const std::vector<std::size_t> useless{1, 2, 3, 0};
    CHECK_THROWS_AS(asr_any(useless, correct, test), std::domain_error);
  }

  TEST_CASE("asr cells hand fixture") {
    const auto test = labelled({0, 0, 1});
    PredictionSet benign{{0, 0, 1}, {all(0), all(0), all(1)}};
    benign.instances[2][0] = 0;
    PredictionSet attacked{{0, 0, 1}, {all(0), all(0), all(1)}};
    attacked.instances[0][0] = 1;
    attacked.instances[2][0] = 0;

    const auto r = evaluate(attacked, benign, test, 2);
    REQUIRE(r.cells.size() == kNumTriggers);
    CHECK(r.cells[0][1].poisoned == 2);
    CHECK(r.cells[0][1].misclassified == 1);
    CHECK_FALSE(r.cells[0][0].rate().has_value());
    for (std::size_t t = 1; t < kNumTriggers; ++t) {
      CHECK(r.cells[t][1].poisoned == 2);
      CHECK(r.cells[t][0].poisoned == 1);
      CHECK(r.cells[t][0].misclassified == 0);
    }
    REQUIRE(r.asr_t[0]);
    CHECK(*r.asr_t[0] == doctest::Approx(0.5));
    CHECK(r.masr == doctest::Approx(0.5));
    CHECK(r.aasr == doctest::Approx(0.5 / kNumTriggers));
    CHECK(r.cacc == 1.0);
    CHECK(r.asr_any == doctest::Approx(2.0 / 3.0));
    CHECK_FALSE(r.warnings.empty());
  }

  TEST_CASE("average never exceeds maximum") {
    Rng rng(13);
    for (int rep = 0; rep < 100; ++rep) {
      const std::size_t classes = 2 + rep % 3;
      std::vector<Example> test;
      PredictionSet benign, attacked;
      for (std::size_t i = 0; i < 30; ++i) {
        const std::size_t y = rng.uniform_int(0, classes - 1);
        test.push_back({Sequence{}, y, std::nullopt});
        benign.clean.push_back(rng.uniform() < 0.8 ? y : rng.uniform_int(0, classes - 1));
        attacked.clean.push_back(y);
        Row b, a;
        for (std::size_t t = 0; t < kNumTriggers; ++t) {
          b[t] = rng.uniform() < 0.8 ? y : rng.uniform_int(0, classes - 1);
          a[t] = rng.uniform_int(0, classes - 1);
        }
        benign.instances.push_back(b);
        attacked.instances.push_back(a);
      }
      const auto r = evaluate(attacked, benign, test, classes);
      CHECK(r.aasr <= r.masr + 1e-12);
      CHECK(r.masr >= 0.0);
      CHECK(r.masr <= 1.0);
    }
  }

  TEST_CASE("cosine similarity") {
    const std::vector<double> a{1, 0}, b{0, 1}, c{-2, 0};
    CHECK(cosine_similarity(a, a) == doctest::Approx(1.0));
    CHECK(cosine_similarity(a, b) == doctest::Approx(0.0));
    CHECK(cosine_similarity(a, c) == doctest::Approx(-1.0));
  }

  TEST_CASE("csv rows match the header") {
    ResultRow row{"por", "lora", "full", 2, 0.9, 0.1, 0.2, 0.05, 1e-3, 1e-2, "ok"};
    CHECK(commas(csv_row(row)) == commas(csv_header()));
    CHECK(to_json(row)["peft"] == "lora");
  }

  TEST_CASE("asr instances are shared and seeded") {
    const auto vocab = Vocab::synthetic(40);
    Rng rng(2);
    std::vector<Example> test;
    for (std::size_t i = 0; i < 10; ++i) test.push_back({test::words(vocab, rng, 4), i % 2, std::nullopt});
    const auto a = make_asr_set(test, vocab, 7, 16), b = make_asr_set(test, vocab, 7, 16);
    CHECK(a.flat() == b.flat());
    CHECK(a.flat().size() == test.size() * kNumTriggers);
    for (std::size_t i = 0; i < test.size(); ++i) {
      for (std::size_t t = 0; t < kNumTriggers; ++t) {
        const auto& s = a.triggered[i][t];
        CHECK(std::count(s.begin(), s.end(), vocab.triggers()[t]) == 1);
      }
    }
  }

  TEST_CASE("dynamics and threshold filtering on a tiny model") {
    const auto vocab = Vocab::synthetic(40);
    const auto base = EncoderParams::init(test::tiny_model(), 4);
    Rng rng(6);
    std::vector<Example> train, test;
    for (std::size_t i = 0; i < 24; ++i) train.push_back({test::words(vocab, rng, 5), i % 2, std::nullopt});
    for (std::size_t i = 0; i < 10; ++i) test.push_back({test::words(vocab, rng, 5), i % 2, std::nullopt});
    FinetuneConfig fc;
    fc.peft.kind = PeftKind::adapter;
    fc.schedule = {3, 8, 5e-3};
    fc.num_classes = 2;

    DynamicsLog log;
    DynamicsProbe probe;
    probe.attention = make_attention_probes(test, vocab, 1, 16);
    const auto tuned = finetune(base, train, fc, track_dynamics(log, probe));
    REQUIRE(log.entries.size() == 4);
    for (std::size_t i = 0; i < log.entries.size(); ++i) {
      CHECK(log.entries[i].epoch == i);
      CHECK(std::isfinite(log.entries[i].peft_norm));
      CHECK(log.entries[i].trigger_attention > 0.0);
    }
    CHECK(to_json(log).size() == 4);

    const auto asr = make_asr_set(test, vocab, 3, 16);
    const auto benign = predict_all([&](auto s) { return tuned.predict(s); }, test, asr);
    const std::vector<double> th{1e9, 0.0};
    const auto pts = attention_threshold_baseline(tuned, benign, test, asr, th);
    REQUIRE(pts.size() == 2);
    CHECK(pts[0].cacc == doctest::Approx(cacc(benign.clean, test)));
    CHECK(pts[0].mean_removed == 0.0);
    CHECK(pts[1].mean_removed > 0.0);
  }
}
