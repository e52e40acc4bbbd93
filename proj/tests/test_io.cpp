#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "bdw/checkpoint.hpp"
#include "bdw/config.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace bdw;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "bdw_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is bitwise") {
    auto model = EncoderParams::init(test::tiny_model(), 3);
    model.head = ClassifierHead::init(16, 3, 4);
    PeftConfig pc;
    pc.kind = PeftKind::prefix;
    pc.prefix_length = 4;
    auto peft = attach(pc, model.config, 5);
    const auto path = temp_path("rt.ckpt");
    save_checkpoint(path, make_checkpoint(model, &peft, {{"note", "x"}}));
    const auto back = load_checkpoint(path);
    CHECK(back.metadata["provenance"]["note"] == "x");

    const auto m2 = restore_encoder(back);
    CHECK(base_fingerprint(m2) == base_fingerprint(model));
    const auto a = model.named_base(), b = m2.named_base();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(test::bitwise_equal(a[i].second, b[i].second));
    REQUIRE(m2.head);
    CHECK(test::bitwise_equal(m2.head->weight, model.head->weight));

    const auto p2 = restore_peft(back);
    REQUIRE(p2);
    CHECK(p2->config.kind == PeftKind::prefix);
    const auto pa = peft.named();
    const auto pb = p2->named();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(test::bitwise_equal(pa[i].second, pb[i].second));

    save_checkpoint(temp_path("rt2.ckpt"), make_checkpoint(m2, &*p2, back.metadata["provenance"]));
    CHECK(slurp(path) == slurp(temp_path("rt2.ckpt")));
  }

  TEST_CASE("no peft section restores to nothing") {
    const auto model = EncoderParams::init(test::tiny_model(), 3);
    const auto path = temp_path("plain.ckpt");
    save_checkpoint(path, make_checkpoint(model, nullptr, {}));
    CHECK_FALSE(restore_peft(load_checkpoint(path)).has_value());
  }

  TEST_CASE("corrupt files are rejected") {
    const auto model = EncoderParams::init(test::tiny_model(), 3);
    const auto path = temp_path("bad.ckpt");
    save_checkpoint(path, make_checkpoint(model, nullptr, {}));
    const auto bytes = slurp(path);

    spit(path, bytes.substr(0, bytes.size() - 10));
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

    spit(path, bytes.substr(0, 6));
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

    auto wrong_version = bytes;
    wrong_version[8] = static_cast<char>(kCheckpointVersion + 1);
    spit(path, wrong_version);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), CheckpointError);

    auto wrong_magic = bytes;
    wrong_magic[0] ^= 0x55;
    spit(path, wrong_magic);
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

    CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ckpt")), CheckpointError);
  }

  TEST_CASE("missing tensor is reported by name") {
    const auto model = EncoderParams::init(test::tiny_model(), 3);
    auto ckpt = make_checkpoint(model, nullptr, {});
    const std::string dropped = ckpt.tensors.front().first;
    ckpt.tensors.erase(ckpt.tensors.begin());
    CHECK_THROWS_WITH_AS(restore_encoder(ckpt), doctest::Contains(dropped.c_str()), CheckpointError);
  }
}

TEST_SUITE("config") {
  TEST_CASE("defaults validate and render round trips") {
    ExperimentConfig c;
    CHECK_NOTHROW(c.validate());
    const auto text = render_config(c);
    CHECK(render_config(parse_config(text)) == text);
  }

  TEST_CASE("values are parsed") {
    const auto c = parse_config(
        "[experiment]\nseed = 7\n[model]\nhidden_dim = 32\n[attack]\nkind = badpre\n"
        "[peft]\nkind = lora\n[sweep]\nseeds = 1, 2\n[defense]\nenabled = false\n");
    CHECK(c.seed == 7);
    CHECK(c.model.hidden_dim == 32);
    REQUIRE(c.attack.kind);
    CHECK(*c.attack.kind == AttackKind::badpre);
    CHECK(c.finetune.peft.kind == PeftKind::lora);
    CHECK(c.sweep.seeds == std::vector<std::uint64_t>{1, 2});
    CHECK_FALSE(c.defense.enabled);
    CHECK_FALSE(parse_config("[attack]\nkind = none\n").attack.kind.has_value());
  }

  TEST_CASE("bad input raises ConfigError") {
    CHECK_THROWS_WITH_AS(parse_config("[model]\nhiden_dim = 3\n"), doctest::Contains("model.hiden_dim"), ConfigError);
    CHECK_THROWS_AS(parse_config("[model]\nhidden_dim = abc\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[model]\nhidden_dim = 30\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[attack]\nkind = zzz\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[attack]\npoison_rate = 0.9\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[defense]\nenabled = maybe\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[sweep]\nseeds =\n"), ConfigError);
    CHECK_THROWS_AS(load_config(temp_path("nope.ini")), ConfigError);
  }

  TEST_CASE("per-PEFT schedule defaults") {
    for (auto k : {PeftKind::adapter, PeftKind::lora, PeftKind::prefix}) {
      FinetuneSettings f;
      f.peft.kind = k;
      const auto s = f.schedule();
      CHECK(s.epochs == default_finetune_schedule(k).epochs);
      CHECK(s.learning_rate == default_finetune_schedule(k).learning_rate);
      f.epochs = 3;
      f.learning_rate = 0.5;
      CHECK(f.schedule().epochs == 3);
      CHECK(f.schedule().learning_rate == 0.5);
    }
  }
}

#ifdef BDW_CLI_PATH
TEST_SUITE("cli") {
  int run(const std::string& args) {
    const std::string cmd = std::string(BDW_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
  }

  TEST_CASE("exit codes") {
    const auto good = temp_path("good.ini"), bad = temp_path("bad.ini");
    spit(good, render_config(ExperimentConfig{}));
    spit(bad, "[model]\nbogus = 1\n");
    CHECK(run("show-config --config " + good.string()) == 0);
    CHECK(run("show-config --config " + bad.string()) == 1);
    CHECK(run("finetune --config " + good.string() + " --plm " + temp_path("absent.ckpt").string()) == 1);
    CHECK(run("no-such-command") != 0);
  }

  TEST_CASE("end to end on a tiny configuration") {
    const auto dir = temp_path("e2e");
    fs::remove_all(dir);
    ExperimentConfig c;
    c.output_dir = dir;
    c.model.hidden_dim = 16;
    c.model.ffn_dim = 32;
    c.pretrain.corpus_size = 200;
    c.pretrain.heldout_size = 20;
    c.pretrain.schedule.epochs = 1;
    c.attack.config.corpus_size = 100;
    c.attack.config.epochs = 1;
    c.attack.heldout_size = 20;
    c.task.config.train_size = 64;
    c.task.config.validation_size = 32;
    c.task.config.test_size = 32;
    c.finetune.epochs = 1;
    c.defense.select = false;
    c.sweep.seeds = {0};
    c.analysis.probes = 8;
    const auto cfg = temp_path("e2e.ini");
    spit(cfg, render_config(c));
    const std::string conf = " --config " + cfg.string();
    REQUIRE(run("pretrain" + conf) == 0);
    REQUIRE(run("attack" + conf) == 0);
    CHECK(run("sweep" + conf) == 0);
    CHECK(fs::exists(dir));
  }
}
#endif
