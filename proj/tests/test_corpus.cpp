#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "bdw/corpus.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace bdw;

TEST_SUITE("corpus") {
  TEST_CASE("vocabulary layout") {
    const auto v = Vocab::synthetic(200);
    CHECK(v.size() == 200);
    CHECK(v.token(v.special().cls) == "[CLS]");
    CHECK(v.first_word() == 5 + kNumTriggers);
    for (std::size_t t = 0; t < kNumTriggers; ++t) {
      CHECK(v.token(v.triggers()[t]) == kTriggerTokens[t]);
      CHECK(v.is_trigger(v.triggers()[t]));
    }
    CHECK(v.id("no-such-token") == v.special().unk);
    CHECK(v.decode(v.encode("cf mn")) == "cf mn");
  }

  TEST_CASE("pretraining corpus shape, determinism and trigger exclusion") {
    const auto v = Vocab::synthetic(200);
    const auto a = build_pretrain_corpus(v, 3, 300);
    CHECK(a == build_pretrain_corpus(v, 3, 300));
    CHECK(a != build_pretrain_corpus(v, 4, 300));
    for (const auto& s : a) {
      CHECK(s.front() == v.special().cls);
      CHECK(s.back() == v.special().sep);
      CHECK(s.size() >= 10);
      CHECK(s.size() <= 22);
      for (std::size_t i = 1; i + 1 < s.size(); ++i) {
        CHECK(s[i] >= v.first_word());
        CHECK_FALSE(v.is_trigger(s[i]));
      }
    }
  }

  TEST_CASE("unigram draws follow the configured Zipf law") {
    const auto v = Vocab::synthetic(200);
    CorpusConfig cfg;
    cfg.zipf_exponent = 1.1;
    SequenceSampler sampler(v, cfg);
    const auto& p = sampler.unigram();
    for (std::size_t r = 1; r < 10; ++r) {
      CHECK(p[0] / p[r] == doctest::Approx(std::pow(static_cast<double>(r + 1), 1.1)).epsilon(1e-9));
    }
    Rng rng(5);
    constexpr std::size_t kDraws = 200000;
    std::vector<double> counts(p.size(), 0.0);
    for (std::size_t i = 0; i < kDraws; ++i) counts[sampler.draw_unigram(rng) - v.first_word()] += 1.0;
    // top 40 ranks individually, the rest pooled
    double chi2 = 0.0, tail_obs = 0.0, tail_exp = 0.0;
    for (std::size_t r = 0; r < p.size(); ++r) {
      const double e = p[r] * kDraws;
      if (r < 40) {
        chi2 += (counts[r] - e) * (counts[r] - e) / e;
      } else {
        tail_obs += counts[r];
        tail_exp += e;
      }
    }
    chi2 += (tail_obs - tail_exp) * (tail_obs - tail_exp) / tail_exp;
    CHECK(chi2 < 80.0);  // 40 degrees of freedom, p < 0.001 above ~73.4
  }

  TEST_CASE("classification task: balanced, disjoint keywords, count oracle separates classes") {
    const auto v = Vocab::synthetic(200);
    TaskConfig cfg;
    const auto task = build_task(v, 11, cfg);
    CHECK(task.train.size() == cfg.train_size);
    CHECK(task.validation.size() == cfg.validation_size);
    CHECK(task.test.size() == cfg.test_size);
    const auto keywords = task_keywords(v, 11, cfg);
    std::set<TokenId> seen;
    for (const auto& ks : keywords) {
      for (auto k : ks) CHECK(seen.insert(k).second);
    }
    std::vector<std::size_t> per_class(cfg.num_classes, 0);
    std::size_t correct = 0;
    for (const auto& ex : task.train) {
      ++per_class[ex.label];
      std::vector<std::size_t> hits(cfg.num_classes, 0);
      for (auto tok : ex.tokens) {
        for (std::size_t c = 0; c < cfg.num_classes; ++c) {
          hits[c] += std::count(keywords[c].begin(), keywords[c].end(), tok);
        }
      }
      correct += static_cast<std::size_t>(std::max_element(hits.begin(), hits.end()) - hits.begin()) == ex.label;
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(task.train.size()) >= 0.9);
    const double expected = static_cast<double>(cfg.train_size) / static_cast<double>(cfg.num_classes);
    for (auto n : per_class) CHECK(std::abs(static_cast<double>(n) - expected) <= 0.05 * expected);
  }

  TEST_CASE("trigger insertion") {
    const auto v = Vocab::synthetic(200);
    const auto task = build_task(v, 12, {});
    const auto& ex = task.test.front();
    Rng a(9), b(9);
    const auto x = insert_trigger(ex, v, 2, a, 32);
    const auto y = insert_trigger(ex, v, 2, b, 32);
    CHECK(x.tokens == y.tokens);
    CHECK(x.tokens.size() == ex.tokens.size() + 1);
    CHECK(std::count_if(x.tokens.begin(), x.tokens.end(), [&](TokenId t) { return v.is_trigger(t); }) == 1);
    CHECK(std::count(x.tokens.begin(), x.tokens.end(), v.triggers()[2]) == 1);
    CHECK(x.tokens.front() == v.special().cls);
    CHECK(x.tokens.back() == v.special().sep);
    CHECK(x.label == ex.label);
    Example full{Sequence(32, v.first_word()), 0, std::nullopt};
    CHECK_THROWS_AS(insert_trigger(full, v, 0, a, 32), std::length_error);
  }

  TEST_CASE("six instances, one trigger each") {
    const auto v = Vocab::synthetic(200);
    const auto task = build_task(v, 13, {});
    Rng rng(1);
    const auto inst = make_asr_instances(task.test[3], v, rng, 32);
    REQUIRE(inst.size() == kNumTriggers);
    for (std::size_t t = 0; t < kNumTriggers; ++t) {
      CHECK(inst[t].label == task.test[3].label);
      for (std::size_t u = 0; u < kNumTriggers; ++u) {
        const auto n = std::count(inst[t].tokens.begin(), inst[t].tokens.end(), v.triggers()[u]);
        CHECK(n == (u == t ? 1 : 0));
      }
    }
  }

  TEST_CASE("masking rate, untouched positions and reconstruction") {
    const auto v = Vocab::synthetic(200);
    const auto corpus = build_pretrain_corpus(v, 14, 50);
    Rng rng(2);
    for (const auto& s : corpus) {
      const auto m = mask_for_mlm(s, v, rng);
      const std::size_t n = s.size() - 2;
      CHECK(m.positions.size() == static_cast<std::size_t>(std::lround(0.15 * static_cast<double>(n))));
      std::set<std::size_t> masked(m.positions.begin(), m.positions.end());
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (masked.count(i)) {
          CHECK(m.tokens[i] == v.special().mask);
        } else {
          CHECK(m.tokens[i] == s[i]);
        }
      }
      CHECK(unmask(m) == s);
    }
  }

  TEST_CASE("tsv round trip") {
    const auto v = Vocab::synthetic(200);
    const auto task = build_task(v, 15, {});
    const auto dir = std::filesystem::temp_directory_path() / "bdw_tsv_test";
    std::filesystem::create_directories(dir);
    for (const char* split : {"train", "validation", "test"}) {
      const auto& rows = std::string(split) == "train" ? task.train : std::string(split) == "test" ? task.test : task.validation;
      save_tsv(dir / (std::string(split) + ".tsv"), rows, v);
    }
    const auto back = load_tsv_bundle(dir, v, 4, 32);
    REQUIRE(back.test.size() == task.test.size());
    for (std::size_t i = 0; i < task.test.size(); ++i) {
      CHECK(back.test[i].tokens == task.test[i].tokens);
      CHECK(back.test[i].label == task.test[i].label);
    }
    std::filesystem::remove_all(dir);
  }
}
