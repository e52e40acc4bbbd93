// Acceptance run: one PASS/FAIL verdict per criterion. The pipeline criteria
// share a single pretrained PLM, one backdoored PLM per attack and three
// fine-tuning seeds per cell.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bdw/gradcheck.hpp"
#include "bdw/pipeline.hpp"

namespace fs = std::filesystem;
using namespace bdw;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

struct Verdict {
  int id;
  std::string title;
  bool pass = true;
  std::vector<std::string> notes;

  void note(const std::string& line) {
    notes.push_back(line);
    std::cout << "  [" << id << "] " << line << "\n" << std::flush;
  }
  void require(bool ok, const std::string& line) {
    pass = pass && ok;
    note(std::string(ok ? "ok   " : "MISS ") + line);
  }
};

// Mutes std::cerr; the metric and selection code warns on every degenerate fixture.
class QuietErrors {
 public:
  QuietErrors() : saved_(std::cerr.rdbuf(nullptr)) {}
  ~QuietErrors() { std::cerr.rdbuf(saved_); }

 private:
  std::streambuf* saved_;
};

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------- criterion 1

void randomize(const Tensor& t, Rng& rng, double scale) {
  for (auto& v : t.mutable_values()) v = rng.normal(scale);
}

GradCheckResult check_op(const std::vector<Tensor>& inputs, const std::function<Tensor()>& op, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> weights;
  auto loss = [&]() {
    Tensor out = op();
    if (weights.size() != out.numel()) {
      weights.resize(out.numel());
      for (auto& w : weights) w = rng.normal(1.0);
    }
    return ops::weighted_sum(out, weights);
  };
  return gradcheck(loss, inputs);
}

Sequence toy_sequence(const Vocab& vocab, Rng& rng, std::size_t words) {
  Sequence s{vocab.special().cls};
  for (std::size_t i = 0; i < words; ++i) {
    s.push_back(static_cast<TokenId>(vocab.first_word() + rng.uniform_int(0, vocab.word_count() - 1)));
  }
  s.push_back(vocab.special().sep);
  return s;
}

Verdict criterion_gradients() {
  Verdict v{1, "gradient suite"};
  const auto start = Clock::now();
  constexpr double kTol = 1e-4;
  Rng rng(101);
  auto t = [&rng](Shape shape, double scale = 1.0) { return rng.normal_tensor(std::move(shape), scale); };

  struct OpCase {
    std::string name;
    std::vector<Tensor> inputs;
    std::function<Tensor(const std::vector<Tensor>&)> op;
  };
  ops::AttentionLayout layout{2, 3, 2, {1, 1, 0, 1, 1, 1}};
  const std::vector<std::size_t> rows{2, 0, 2};
  const std::vector<std::size_t> labels{1, 0, 3};
  std::vector<double> weights{0.5, -1.5, 2.0, 0.25, 1.0, -0.75};
  std::vector<OpCase> cases{
      {"matmul", {t({3, 4}), t({4, 2})}, [](auto& x) { return ops::matmul(x[0], x[1]); }},
      {"transpose", {t({3, 4})}, [](auto& x) { return ops::transpose(x[0]); }},
      {"reshape", {t({2, 6})}, [](auto& x) { return ops::reshape(x[0], {3, 4}); }},
      {"add", {t({3, 4}), t({3, 4})}, [](auto& x) { return ops::add(x[0], x[1]); }},
      {"sub", {t({3, 4}), t({3, 4})}, [](auto& x) { return ops::sub(x[0], x[1]); }},
      {"mul", {t({3, 4}), t({3, 4})}, [](auto& x) { return ops::mul(x[0], x[1]); }},
      {"scale", {t({3, 4})}, [](auto& x) { return ops::scale(x[0], -2.5); }},
      {"add_bias", {t({3, 4}), t({4})}, [](auto& x) { return ops::add_bias(x[0], x[1]); }},
      {"gelu", {t({3, 4})}, [](auto& x) { return ops::gelu(x[0]); }},
      {"tanh", {t({3, 4})}, [](auto& x) { return ops::tanh(x[0]); }},
      {"relu", {t({3, 4})}, [](auto& x) { return ops::relu(x[0]); }},
      {"softmax rows", {t({3, 5})}, [](auto& x) { return ops::softmax(x[0], 1); }},
      {"softmax cols", {t({3, 5})}, [](auto& x) { return ops::softmax(x[0], 0); }},
      {"layer_norm", {t({3, 6}), t({6}), t({6})}, [](auto& x) { return ops::layer_norm(x[0], x[1], x[2]); }},
      {"smoothed_l2_norm", {t({3, 4})}, [](auto& x) { return ops::smoothed_l2_norm(x[0], 1e-8); }},
      {"row_norms", {t({3, 4})}, [](auto& x) { return ops::row_norms(x[0], 1e-8); }},
      {"normalize_rows", {t({3, 4})}, [](auto& x) { return ops::normalize_rows(x[0]); }},
      {"sum", {t({3, 4})}, [](auto& x) { return ops::sum(x[0]); }},
      {"mean", {t({3, 4})}, [](auto& x) { return ops::mean(x[0]); }},
      {"weighted_sum", {t({2, 3})}, [weights](auto& x) { return ops::weighted_sum(x[0], weights); }},
      {"gather_rows", {t({3, 4})}, [rows](auto& x) { return ops::gather_rows(x[0], rows); }},
      {"slice_cols", {t({3, 5})}, [](auto& x) { return ops::slice_cols(x[0], 1, 3); }},
      {"cross_entropy", {t({3, 4})}, [labels](auto& x) { return ops::cross_entropy(x[0], labels); }},
      {"cross_entropy single", {t({1, 4})}, [](auto& x) { return ops::cross_entropy(x[0], std::size_t{2}); }},
      {"attention_probs", {t({6, 4}), t({6, 4}), t({2, 4})},
       [layout](auto& x) { return ops::attention_probs(x[0], x[1], x[2], layout); }},
      {"attention_context", {t({12, 5}), t({6, 4}), t({2, 4})},
       [layout](auto& x) { return ops::attention_context(x[0], x[1], x[2], layout); }},
  };
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    auto& c = cases[i];
    const auto r = check_op(c.inputs, [&c]() { return c.op(c.inputs); }, 7 + i);
    worst = std::max(worst, r.max_error);
    checked += r.checked;
    if (!(r.max_error < kTol)) v.require(false, c.name + " rel error " + fmt(r.max_error) + " at " + r.worst);
  }
  v.require(worst < kTol, std::to_string(cases.size()) + " ops, " + std::to_string(checked) + " entries, max rel error " +
                              fmt(worst, 3));

  ModelConfig mc;
  mc.num_layers = 2;
  mc.num_heads = 4;
  mc.hidden_dim = 16;
  mc.ffn_dim = 32;
  mc.vocab_size = 40;
  mc.max_seq_len = 12;
  const auto vocab = Vocab::synthetic(mc.vocab_size);
  const auto base = EncoderParams::init(mc, 5);
  Rng seq_rng(17);
  std::vector<Sequence> seqs{toy_sequence(vocab, seq_rng, 5), toy_sequence(vocab, seq_rng, 9),
                             toy_sequence(vocab, seq_rng, 3)};
  const std::vector<std::size_t> y{0, 2, 1};
  const auto batch = Batch::pack(seqs, mc.special.pad);
  const DefenseConfig defense{0.05, 0.1, true, true, 1e-8};
  for (auto kind : {PeftKind::adapter, PeftKind::lora, PeftKind::prefix}) {
    PeftConfig pc;
    pc.kind = kind;
    pc.rank = 2;
    pc.prefix_length = 3;
    pc.bottleneck = 8;
    TunedModel m{base.clone(), attach(pc, mc, 9)};
    m.model.head = ClassifierHead::init(mc.hidden_dim, 3, 11);
    Rng init(23);
    std::vector<Tensor> inputs;
    std::vector<std::string> names;
    for (auto& [name, tensor] : m.peft.named()) {
      randomize(tensor, init, 0.3);
      inputs.push_back(tensor);
      names.push_back("peft." + name);
    }
    for (auto& [name, tensor] : m.model.head->named()) {
      inputs.push_back(tensor);
      names.push_back("head." + name);
    }
    for (auto& [name, tensor] : m.model.named_base()) {
      inputs.push_back(tensor);
      names.push_back("base." + name);
    }
    auto objective = [&]() {
      const auto trace = forward(m.model, batch, &m.peft);
      const Tensor task = ops::cross_entropy(classify(m.model, trace), y);
      const Tensor amp = amp_loss(m.peft, defense.epsilon);
      const Tensor reg = reg_loss(trace, defense.epsilon);
      return total_loss(task, &amp, &reg, defense);
    };
    GradCheckOptions opt;
    opt.max_entries = 8;
    opt.seed = 3;
    const auto r = gradcheck(objective, inputs, names, opt);
    v.require(r.max_error < kTol, "full defended objective, " + to_string(kind) + ": " + std::to_string(r.checked) +
                                      " entries, max rel error " + fmt(r.max_error, 3) + " (" + r.worst + ")");
  }

  {
    auto m = base.clone();
    std::vector<Tensor> inputs;
    std::vector<std::string> names;
    for (auto& [name, tensor] : m.named_base()) {
      inputs.push_back(tensor);
      names.push_back(name);
    }
    Rng mask_rng(5);
    std::vector<MaskedSequence> masked;
    for (const auto& s : seqs) masked.push_back(mask_for_mlm(s, vocab, mask_rng, 0.4));
    auto objective = [&]() {
      ForwardTrace trace;
      Tensor loss = mlm_loss(m, masked, nullptr, &trace);
      return ops::add(loss, summary_loss(m, trace, seqs, vocab));
    };
    GradCheckOptions opt;
    opt.max_entries = 8;
    const auto r = gradcheck(objective, inputs, names, opt);
    v.require(r.max_error < kTol, "pretraining objective: " + std::to_string(r.checked) + " entries, max rel error " +
                                      fmt(r.max_error, 3) + " (" + r.worst + ")");
  }
  const double elapsed = seconds_since(start);
  v.require(elapsed < 120.0, "runtime " + fmt(elapsed, 3) + " s (limit 120 s)");
  return v;
}

// ---------------------------------------------------------------- criterion 2

struct Recount {
  std::size_t any_num = 0, any_den = 0;
  std::vector<std::vector<std::size_t>> mis, pois;
};

Recount brute_force(const std::vector<std::size_t>& labels, const std::vector<std::size_t>& benign_clean,
                    const InstancePredictions& benign, const InstancePredictions& evaluated, std::size_t classes) {
  Recount r;
  r.mis.assign(kNumTriggers, std::vector<std::size_t>(classes, 0));
  r.pois.assign(kNumTriggers, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (benign_clean[i] == labels[i]) {
      ++r.any_den;
      bool flipped = false;
      for (std::size_t t = 0; t < kNumTriggers; ++t) flipped = flipped || evaluated[i][t] != labels[i];
      if (flipped) ++r.any_num;
    }
  }
  for (std::size_t t = 0; t < kNumTriggers; ++t) {
    for (std::size_t l = 0; l < classes; ++l) {
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == l || benign[i][t] != labels[i]) continue;
        ++r.pois[t][l];
        if (evaluated[i][t] == l) ++r.mis[t][l];
      }
    }
  }
  return r;
}

Verdict criterion_metrics() {
  Verdict v{2, "metric oracle equivalence"};
  QuietErrors quiet;
  Rng rng(2024);
  std::size_t mismatches = 0;
  constexpr std::size_t kFixtures = 50, kSamples = 200;
  for (std::size_t f = 0; f < kFixtures; ++f) {
    const std::size_t classes = 2 + f % 3;
    const double p_benign = 0.5 + 0.5 * rng.uniform();
    const double p_flip = rng.uniform();
    std::vector<Example> test(kSamples);
    std::vector<std::size_t> labels(kSamples), benign_clean(kSamples);
    PredictionSet benign, evaluated;
    benign.instances.resize(kSamples);
    evaluated.instances.resize(kSamples);
    auto other = [&](std::size_t y) { return (y + 1 + rng.uniform_int(0, classes - 2)) % classes; };
    for (std::size_t i = 0; i < kSamples; ++i) {
      labels[i] = rng.uniform_int(0, classes - 1);
      test[i].label = labels[i];
      benign_clean[i] = rng.uniform() < p_benign ? labels[i] : other(labels[i]);
      for (std::size_t t = 0; t < kNumTriggers; ++t) {
        benign.instances[i][t] = rng.uniform() < p_benign ? labels[i] : other(labels[i]);
        evaluated.instances[i][t] = rng.uniform() < p_flip ? other(labels[i]) : labels[i];
      }
    }
    benign.clean = benign_clean;
    evaluated.clean = benign_clean;
    const auto report = evaluate(evaluated, benign, test, classes);
    const auto truth = brute_force(labels, benign_clean, benign.instances, evaluated.instances, classes);
    bool same = report.asr_any_denominator == truth.any_den &&
                report.asr_any == static_cast<double>(truth.any_num) / static_cast<double>(truth.any_den);
    double masr = 0.0, sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t t = 0; t < kNumTriggers; ++t) {
      std::optional<double> best;
      for (std::size_t l = 0; l < classes; ++l) {
        same = same && report.cells[t][l].poisoned == truth.pois[t][l] && report.cells[t][l].misclassified == truth.mis[t][l];
        if (truth.pois[t][l] == 0) continue;
        const double rate = static_cast<double>(truth.mis[t][l]) / static_cast<double>(truth.pois[t][l]);
        best = best ? std::max(*best, rate) : rate;
      }
      same = same && report.asr_t[t] == best;
      if (best) {
        masr = std::max(masr, *best);
        sum += *best;
        ++defined;
      }
    }
    same = same && report.masr == masr && report.aasr == (defined ? sum / static_cast<double>(defined) : 0.0);
    if (!same) ++mismatches;
  }
  v.require(mismatches == 0, std::to_string(kFixtures) + " randomized 200-sample fixtures, " +
                                 std::to_string(mismatches) + " differ from the brute-force recount");

  MetricsReport hand;
  hand.cells = {{{1, 5}, {3, 5}}, {{9, 10}, {1, 10}}};
  summarize_cells(hand);
  v.require(hand.asr_t[0] == 0.6 && hand.asr_t[1] == 0.9, "hand fixture asr_t = {" + fmt(*hand.asr_t[0]) + ", " +
                                                              fmt(*hand.asr_t[1]) + "}");
  v.require(hand.masr == 0.9 && hand.aasr == 0.75,
            "hand fixture MASR " + fmt(hand.masr, 17) + ", AASR " + fmt(hand.aasr, 17));
  return v;
}

// ---------------------------------------------------------------- criterion 3

Verdict criterion_losses() {
  Verdict v{3, "loss-value unit checks"};
  const Tensor w = Tensor::from({2, 2}, {3, 4, 0, 0});
  const std::vector<Tensor> single{w};
  const double amp = amp_loss(single, 0.0).item();
  v.require(amp == -5.0, "amp_loss([[3,4],[0,0]], eps=0) = " + fmt(amp, 17));

  ForwardTrace trace;
  trace.batch = 1;
  trace.seq_len = 4;
  trace.heads = 1;
  trace.attention = {Tensor::filled({4, 4}, 0.25)};
  const double reg = reg_loss(trace, 0.0).item();
  v.require(reg == 0.5, "reg_loss, one head uniform over 4 keys = " + fmt(reg, 17));

  const Tensor task = Tensor::scalar(0.7), a = Tensor::scalar(-5.0), r = Tensor::scalar(2.0);
  const double total = total_loss(task, &a, &r, {1e-3, 1e-2, true, true, 1e-8}).item();
  v.require(std::abs(total - 0.715) < 1e-12, "total_loss(0.7, -5, 2; 1e-3, 1e-2) = " + fmt(total, 17));

  const Tensor odd = Tensor::scalar(0.123456789012345678);
  const double reduced = total_loss(odd, &a, &r, {0.0, 0.0, true, true, 1e-8}).item();
  v.require(reduced == odd.item(), "lambda = 0 returns the task loss bitwise");
  return v;
}

// ---------------------------------------------------------------- criterion 12

Verdict criterion_lambda_rule() {
  Verdict v{12, "lambda-selection rule"};
  QuietErrors quiet;
  LambdaGrid grid;
  const std::map<double, double> table{{1e-3, 0.91}, {2e-3, 0.905}, {3e-3, 0.89}, {5e-3, 0.85}};
  const auto sel = select_lambdas(grid, 0.92, [&](double la, double) { return table.at(la); });
  v.require(sel.lambda_amp == 2e-3 && !sel.amp_fallback, "synthetic table, baseline 0.92 -> lambda_amp " + fmt(sel.lambda_amp));

  Rng rng(77);
  std::size_t violations = 0;
  constexpr std::size_t kTrials = 2000;
  for (std::size_t trial = 0; trial < kTrials; ++trial) {
    LambdaGrid g;
    g.amp.clear();
    g.reg.clear();
    const std::size_t na = 1 + rng.uniform_int(0, 5), nr = 1 + rng.uniform_int(0, 5);
    double x = 0.0;
    for (std::size_t i = 0; i < na; ++i) g.amp.push_back(x += 1e-3 * (1 + rng.uniform_int(0, 3)));
    x = 0.0;
    for (std::size_t i = 0; i < nr; ++i) g.reg.push_back(x += 1e-2 * (1 + rng.uniform_int(0, 3)));
    const double baseline = 0.5 + 0.5 * rng.uniform();
    std::map<std::pair<double, double>, double> cacc;
    auto fn = [&](double la, double lr) {
      auto [it, fresh] = cacc.try_emplace({la, lr}, 0.0);
      if (fresh) it->second = baseline * (0.94 + 0.08 * rng.uniform());
      return it->second;
    };
    const auto s = select_lambdas(g, baseline, fn);
    const double floor = (1.0 - g.max_drop) * baseline;
    auto expect = [&](const std::vector<double>& values, bool amp) {
      for (auto it = values.rbegin(); it != values.rend(); ++it) {
        const auto key = amp ? std::pair{*it, g.reg.front()} : std::pair{g.amp.front(), *it};
        if (cacc.at(key) >= floor) return std::pair{*it, false};
      }
      return std::pair{values.front(), true};
    };
    const auto ea = expect(g.amp, true);
    const auto er = expect(g.reg, false);
    if (s.lambda_amp != ea.first || s.amp_fallback != ea.second || s.lambda_reg != er.first ||
        s.reg_fallback != er.second) {
      ++violations;
    }
  }
  v.require(violations == 0, std::to_string(kTrials) + " random grids and CACC tables: " + std::to_string(violations) +
                                 " selections differ from the largest value meeting the 2% bound");
  return v;
}

// ---------------------------------------------------------------- criterion 6

int freeze_probe() {
  return run_with_exit_codes([]() -> int {
    ModelConfig mc;
    mc.hidden_dim = 16;
    mc.ffn_dim = 32;
    mc.vocab_size = 40;
    mc.max_seq_len = 12;
    const auto vocab = Vocab::synthetic(mc.vocab_size);
    const auto base = EncoderParams::init(mc, 1);
    Rng rng(2);
    std::vector<Example> train;
    for (std::size_t i = 0; i < 8; ++i) train.push_back({toy_sequence(vocab, rng, 4), i % 2, std::nullopt});
    FinetuneConfig fc;
    fc.num_classes = 2;
    fc.schedule = {1, 4, 1e-3};
    finetune(base, train, fc, [](std::size_t epoch, const TunedModel& m) {
      if (epoch == 1) m.model.token_embedding.mutable_values()[0] += 1.0;
    });
    return kOk;
  });
}

Verdict criterion_freeze(const std::string& self, std::size_t runs, bool fingerprints_held) {
  Verdict v{6, "freeze contract"};
  if (runs > 0) {
    v.require(fingerprints_held, std::to_string(runs) +
                                     " fine-tuning runs completed with base fingerprints unchanged; PLM hashes identical "
                                     "before and after the whole run");
  }
  const int status = std::system(("\"" + self + "\" --freeze-probe 2>/dev/null").c_str());
  const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  v.require(code == kContractViolation, "base tensor edited mid-training -> exit code " + std::to_string(code));
  return v;
}

// ---------------------------------------------------------------- criterion 13

std::string file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Verdict criterion_determinism(const fs::path& scratch) {
  Verdict v{13, "determinism"};
  QuietErrors quiet;
  ExperimentConfig cfg;
  cfg.pretrain.corpus_size = 600;
  cfg.pretrain.heldout_size = 50;
  cfg.pretrain.schedule = {1, 32, 1e-3};
  cfg.task.config.train_size = 160;
  cfg.task.config.validation_size = 80;
  cfg.task.config.test_size = 80;
  cfg.attack.heldout_size = 50;
  cfg.attack.config.corpus_size = 300;
  cfg.attack.config.epochs = 1;
  cfg.finetune.epochs = 1;
  cfg.finetune.batch_size = 16;
  cfg.finetune.learning_rate = 5e-3;
  cfg.analysis.probes = 20;
  fs::create_directories(scratch);

  auto run = [&](int pass) {
    const auto ws = make_workspace(cfg);
    const auto clean = run_pretrain(cfg, ws.vocab).model;
    save_checkpoint(scratch / ("clean" + std::to_string(pass)), make_checkpoint(clean, nullptr, {}));
    const auto ck = run_attack(cfg, clean, ws.vocab);
    save_checkpoint(scratch / ("attack" + std::to_string(pass)), make_checkpoint(ck.params, nullptr, to_json(ck.provenance)));
    const auto asr = experiment_asr_set(cfg, ws, 0);
    const auto ref = make_reference(cfg, clean, ws, asr, 0);
    const auto out = run_experiment(cfg, ck.params, ws, ref, asr, 0, {5e-3, 5e-2, true, true, 1e-8});
    save_checkpoint(scratch / ("tuned" + std::to_string(pass)), make_checkpoint(out.model.model, &out.model.peft, {}));
    return to_json(out.report).dump() + csv_row(out.row);
  };
  const auto first = run(0);
  const auto second = run(1);
  for (const char* stage : {"clean", "attack", "tuned"}) {
    const auto a = file_bytes(scratch / (std::string(stage) + "0"));
    const auto b = file_bytes(scratch / (std::string(stage) + "1"));
    v.require(!a.empty() && a == b, std::string(stage) + " checkpoint bytes identical across two runs (" +
                                        std::to_string(a.size()) + " bytes)");
  }
  v.require(first == second, "metrics report and result row identical across two runs");
  return v;
}

// ---------------------------------------------------------------- pipeline

struct Attacked {
  EncoderParams params;
  std::optional<AdversarialTargets> targets;
  double seconds = 0.0;
  std::uint64_t fingerprint = 0;
};

struct CellRuns {
  std::vector<ExperimentOutcome> undefended, defended, amp_only, reg_only;
  std::vector<DynamicsLog> undefended_dynamics, defended_dynamics;
  LambdaSelection selection;
  double undefended_seconds = 0.0;
};

struct Pipeline {
  ExperimentConfig base;
  Workspace ws;
  EncoderParams clean;
  std::map<AttackKind, Attacked> attacks;
  std::map<PeftKind, std::vector<Reference>> references;
  std::map<PeftKind, double> reference_seconds;
  std::map<PeftKind, std::vector<AsrInstances>> asr;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t runs = 0;
  std::optional<fs::path> cache;

  ExperimentConfig config(std::optional<AttackKind> attack, PeftKind peft) const {
    auto cfg = base;
    cfg.attack.kind = attack;
    cfg.finetune.peft.kind = peft;
    return cfg;
  }

  void prepare_clean() {
    const auto path = cache ? std::optional(*cache / "clean.ckpt") : std::nullopt;
    if (path && fs::exists(*path)) {
      clean = restore_encoder(load_checkpoint(*path));
      clean.head.reset();
      std::cout << "clean PLM loaded from " << path->string() << std::endl;
      return;
    }
    const auto start = Clock::now();
    auto result = run_pretrain(base, ws.vocab);
    clean = std::move(result.model);
    std::cout << "pretrained clean PLM in " << fmt(seconds_since(start), 3) << " s, held-out MLM accuracy "
              << fmt(result.log.heldout_accuracy) << std::endl;
    if (path) save_checkpoint(*path, make_checkpoint(clean, nullptr, {}));
  }

  const Attacked& attack(AttackKind kind) {
    if (auto it = attacks.find(kind); it != attacks.end()) return it->second;
    auto cfg = base;
    cfg.attack.kind = kind;
    if (kind == AttackKind::adaptive_por) {
      cfg.attack.config.amplification_weight = 5e-3;
      cfg.attack.config.attention_reg_weight = 5e-2;
    }
    const auto path = cache ? std::optional(*cache / (to_string(kind) + ".ckpt")) : std::nullopt;
    Attacked a;
    if (path && fs::exists(*path)) {
      const auto ckpt = load_checkpoint(*path);
      a.params = restore_encoder(ckpt);
      a.params.head.reset();
      const auto prov = ckpt.metadata.value("provenance", nlohmann::json::object());
      a.targets = targets_from_json(prov);
      a.seconds = prov.value("seconds", 0.0);
      std::cout << to_string(kind) << " PLM loaded from " << path->string() << std::endl;
    } else {
      const auto start = Clock::now();
      auto ck = run_attack(cfg, clean, ws.vocab);
      a.seconds = seconds_since(start);
      a.params = std::move(ck.params);
      a.targets = ck.provenance.targets;
      std::cout << to_string(kind) << " attack trained in " << fmt(a.seconds, 3) << " s, clean drift "
                << fmt(ck.diagnostics.clean_drift);
      if (ck.diagnostics.target_cosine) std::cout << ", target cosine " << fmt(*ck.diagnostics.target_cosine);
      std::cout << std::endl;
      if (path) {
        auto prov = to_json(ck.provenance);
        prov["seconds"] = a.seconds;
        save_checkpoint(*path, make_checkpoint(a.params, nullptr, prov));
      }
    }
    a.fingerprint = base_fingerprint(a.params);
    return attacks.emplace(kind, std::move(a)).first->second;
  }

  void prepare_references(PeftKind peft) {
    if (references.count(peft)) return;
    const auto cfg = config(std::nullopt, peft);
    const auto start = Clock::now();
    for (auto s : seeds) {
      asr[peft].push_back(experiment_asr_set(cfg, ws, s));
      references[peft].push_back(make_reference(cfg, clean, ws, asr[peft].back(), s));
      ++runs;
    }
    reference_seconds[peft] = seconds_since(start);
    std::vector<double> c;
    for (const auto& r : references[peft]) c.push_back(cacc(r.predictions.clean, ws.task.test));
    std::cout << "benign " << to_string(peft) << " references: CACC " << fmt(mean(c)) << " ("
              << fmt(reference_seconds[peft], 3) << " s)" << std::endl;
  }

  ExperimentOutcome experiment(const ExperimentConfig& cfg, const EncoderParams& plm, PeftKind peft, std::size_t i,
                               const DefenseConfig& defense, const EpochHook& hook = {}) {
    ++runs;
    return run_experiment(cfg, plm, ws, references.at(peft)[i], asr.at(peft)[i], seeds[i], defense, hook);
  }

  static std::string describe(const std::vector<ExperimentOutcome>& runs) {
    std::vector<double> a, c;
    for (const auto& r : runs) {
      a.push_back(r.report.asr_any);
      c.push_back(r.report.cacc);
    }
    std::ostringstream os;
    os << "asr_any " << fmt(mean(a)) << " [";
    for (std::size_t i = 0; i < a.size(); ++i) os << (i ? " " : "") << fmt(a[i], 3);
    os << "], CACC " << fmt(mean(c));
    return os.str();
  }

  // Undefended runs, lambda selection and defended runs of one cell.
  CellRuns cell(std::optional<AttackKind> attack, PeftKind peft, bool dynamics, bool ablations,
                const std::vector<AttentionProbe>* probes) {
    prepare_references(peft);
    const auto cfg = config(attack, peft);
    const EncoderParams& plm = attack ? this->attack(*attack).params : clean;
    const std::string label = (attack ? to_string(*attack) : std::string("benign")) + "/" + to_string(peft);
    CellRuns out;
    const auto start = Clock::now();
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      EpochHook hook;
      if (dynamics) {
        out.undefended_dynamics.emplace_back();
        hook = track_dynamics(out.undefended_dynamics.back(), {*probes, {}, nullptr, nullptr});
      }
      out.undefended.push_back(experiment(cfg, plm, peft, i, DefenseConfig::none(), hook));
    }
    out.undefended_seconds = seconds_since(start);
    std::cout << label << " undefended: " << describe(out.undefended) << " (" << fmt(out.undefended_seconds, 3)
              << " s)" << std::endl;
    ++runs;
    out.selection = run_lambda_selection(cfg, plm, ws, seeds[0], validation_cacc(out.undefended[0].model, ws));
    runs += out.selection.trials.size();
    std::cout << label << " selected lambda_amp " << out.selection.lambda_amp << ", lambda_reg "
              << out.selection.lambda_reg << " (validation baseline " << fmt(out.selection.baseline_cacc) << ")" << std::endl;
    DefenseConfig full = base.defense.config;
    full.lambda_amp = out.selection.lambda_amp;
    full.lambda_reg = out.selection.lambda_reg;
    full.amp_enabled = full.reg_enabled = true;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      EpochHook hook;
      if (dynamics) {
        out.defended_dynamics.emplace_back();
        hook = track_dynamics(out.defended_dynamics.back(), {*probes, {}, nullptr, nullptr});
      }
      out.defended.push_back(experiment(cfg, plm, peft, i, full, hook));
    }
    std::cout << label << " defended: " << describe(out.defended) << std::endl;
    if (ablations) {
      DefenseConfig amp_only = full, reg_only = full;
      amp_only.reg_enabled = false;
      reg_only.amp_enabled = false;
      for (std::size_t i = 0; i < seeds.size(); ++i) {
        out.amp_only.push_back(experiment(cfg, plm, peft, i, amp_only));
        out.reg_only.push_back(experiment(cfg, plm, peft, i, reg_only));
      }
      std::cout << label << " amp only: " << describe(out.amp_only) << std::endl;
      std::cout << label << " reg only: " << describe(out.reg_only) << std::endl;
    }
    return out;
  }
};

std::vector<double> asr_of(const std::vector<ExperimentOutcome>& runs) {
  std::vector<double> out;
  for (const auto& r : runs) out.push_back(r.report.asr_any);
  return out;
}

std::vector<double> cacc_of(const std::vector<ExperimentOutcome>& runs) {
  std::vector<double> out;
  for (const auto& r : runs) out.push_back(r.report.cacc);
  return out;
}

double final_cosine(const TunedModel& m, const TargetProbes& probes) {
  return layer_similarity(m.model, &m.peft, probes.sequences, probes.references).back();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string cache;
  bool probe = false;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--cache", cache, "directory for reusable PLM checkpoints");
  app.add_flag("--freeze-probe", probe, "fine-tune while editing the base; exits with the CLI's code");
  CLI11_PARSE(app, argc, argv);
  if (probe) return freeze_probe();

  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int id) { return selected.empty() || selected.count(id) > 0; };
  const std::string self = fs::absolute(fs::path(argv[0])).string();
  const fs::path scratch = fs::temp_directory_path() / ("bdw_acceptance_" + std::to_string(::getpid()));
  std::vector<Verdict> verdicts;
  auto record = [&](Verdict v) {
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << v.id << ": " << v.title << "\n" << std::flush;
    verdicts.push_back(std::move(v));
  };

  if (wanted(1)) record(criterion_gradients());
  if (wanted(2)) record(criterion_metrics());
  if (wanted(3)) record(criterion_losses());
  if (wanted(12)) record(criterion_lambda_rule());
  if (wanted(13)) record(criterion_determinism(scratch));

  const bool heavy = std::any_of(selected.begin(), selected.end(), [](int id) {
    return id == 4 || id == 5 || id == 7 || id == 8 || id == 9 || id == 10 || id == 11;
  }) || selected.empty();
  std::size_t runs = 0;
  bool fingerprints_held = true;
  if (heavy) {
    Pipeline p{ExperimentConfig{}, {}, {}, {}, {}, {}, {}, {0, 1, 2}, 0, std::nullopt};
    if (!cache.empty()) {
      fs::create_directories(cache);
      p.cache = fs::path(cache);
    }
    p.ws = make_workspace(p.base);
    p.prepare_clean();
    const auto clean_hash = base_fingerprint(p.clean);
    const std::vector<PeftKind> pefts{PeftKind::adapter, PeftKind::lora, PeftKind::prefix};
    const std::vector<AttackKind> attacks{AttackKind::por, AttackKind::neuba, AttackKind::badpre};
    const auto probes = experiment_probes(p.base, p.ws, p.base.seed);
    std::map<std::pair<AttackKind, PeftKind>, CellRuns> cells;
    const bool need_cells = wanted(4) || wanted(5) || wanted(8) || wanted(9) || wanted(10);
    if (need_cells) {
      for (auto a : attacks) {
        if (!(wanted(4) || wanted(5)) && a != AttackKind::por) continue;
        for (auto peft : pefts) {
          if (!(wanted(4) || wanted(5)) && peft != PeftKind::adapter) continue;
          const bool por_adapter = a == AttackKind::por && peft == PeftKind::adapter;
          cells.emplace(std::pair{a, peft}, p.cell(a, peft, por_adapter, por_adapter && wanted(10), &probes));
        }
      }
    }

    if (wanted(4)) {
      Verdict v{4, "attack efficacy precondition"};
      for (const auto& [key, c] : cells) {
        const double asr = mean(asr_of(c.undefended));
        const double minutes =
            (p.attacks.at(key.first).seconds + p.reference_seconds.at(key.second) + c.undefended_seconds) / 60.0;
        v.require(asr >= 0.80 && minutes <= 10.0, to_string(key.first) + "/" + to_string(key.second) +
                                                      ": undefended asr_any " + fmt(asr) + " (>= 0.80), cell time " +
                                                      fmt(minutes, 3) + " min (<= 10)");
      }
      record(v);
    }
    if (wanted(5)) {
      Verdict v{5, "defense efficacy"};
      std::size_t scored = 0;
      for (const auto& [key, c] : cells) {
        const std::string label = to_string(key.first) + "/" + to_string(key.second);
        const double before = mean(asr_of(c.undefended));
        if (before < 0.80) {
          v.note("excluded " + label + ": attack failure (undefended asr_any " + fmt(before) + ")");
          continue;
        }
        ++scored;
        const double after = mean(asr_of(c.defended));
        const double drop = mean(cacc_of(c.undefended)) - mean(cacc_of(c.defended));
        const double reduction = (before - after) / before;
        v.require(after <= 0.30 && drop <= 0.05 && reduction >= 0.60,
                  label + ": defended asr_any " + fmt(after) + " (<= 0.30), CACC drop " + fmt(100 * drop, 3) +
                      " pts (<= 5), relative reduction " + fmt(100 * reduction, 3) + "% (>= 60%)");
      }
      v.require(scored > 0, std::to_string(scored) + " cells scored");
      record(v);
    }
    if (wanted(7)) {
      Verdict v{7, "benign-model safety"};
      for (auto peft : pefts) {
        const auto c = p.cell(std::nullopt, peft, false, false, nullptr);
        const double drop = mean(cacc_of(c.undefended)) - mean(cacc_of(c.defended));
        v.require(drop <= 0.03, to_string(peft) + ": CACC " + fmt(mean(cacc_of(c.undefended))) + " -> " +
                                    fmt(mean(cacc_of(c.defended))) + ", drop " + fmt(100 * drop, 3) + " pts (<= 3)");
      }
      record(v);
    }
    if (wanted(8)) {
      Verdict v{8, "similarity separation"};
      const auto& c = cells.at({AttackKind::por, PeftKind::adapter});
      const auto tp = target_probes(probes, p.ws.vocab, *p.attack(AttackKind::por).targets);
      std::vector<double> benign, backdoored, defended;
      for (std::size_t i = 0; i < p.seeds.size(); ++i) {
        benign.push_back(final_cosine(p.references.at(PeftKind::adapter)[i].model, tp));
        backdoored.push_back(final_cosine(c.undefended[i].model, tp));
        defended.push_back(final_cosine(c.defended[i].model, tp));
      }
      const double b = mean(benign), u = mean(backdoored), d = mean(defended);
      v.note("POR/adapter final-layer cosine to targets: benign " + fmt(b) + ", backdoored " + fmt(u) + ", defended " +
             fmt(d));
      v.require(u > 0.9, "backdoored undefended " + fmt(u) + " > 0.9");
      v.require(d < 0.5, "defended " + fmt(d) + " < 0.5");
      v.require(std::abs(d - b) <= 0.15, "defended within 0.15 of benign (|diff| " + fmt(std::abs(d - b)) + ")");
      record(v);
    }
    if (wanted(9)) {
      Verdict v{9, "attention dynamics"};
      const auto& c = cells.at({AttackKind::por, PeftKind::adapter});
      auto ratio = [](const std::vector<DynamicsLog>& logs, std::size_t entry) {
        std::vector<double> r;
        for (const auto& log : logs) {
          const auto& e = log.entries.at(entry);
          r.push_back(e.trigger_attention / e.normal_attention);
        }
        return mean(r);
      };
      const std::size_t last = c.undefended_dynamics.front().entries.size() - 1;
      const double start = ratio(c.undefended_dynamics, 0);
      const double und = ratio(c.undefended_dynamics, last), def = ratio(c.defended_dynamics, last);
      v.require(start >= 2.0, "trigger/normal attention at fine-tune start " + fmt(start) + " (>= 2)");
      const double excess_shrink = (und - def) / (und - 1.0);
      v.note("epoch " + std::to_string(last) + ": ratio undefended " + fmt(und) + ", defended " + fmt(def) +
             " (raw ratio shrink " + fmt(100 * (und - def) / und, 3) + "%)");
      v.require(und > 1.0 && excess_shrink >= 0.5,
                "excess attention (ratio - 1) shrinks " + fmt(100 * excess_shrink, 3) + "% (>= 50%)");
      record(v);
    }
    if (wanted(10)) {
      Verdict v{10, "ablation ordering"};
      const auto& c = cells.at({AttackKind::por, PeftKind::adapter});
      const double full = mean(asr_of(c.defended)), amp = mean(asr_of(c.amp_only)), reg = mean(asr_of(c.reg_only));
      v.require(full <= std::min(amp, reg) + 0.05, "POR/adapter asr_any: full " + fmt(full) + ", amp only " + fmt(amp) +
                                                       ", reg only " + fmt(reg));
      record(v);
    }
    if (wanted(11)) {
      Verdict v{11, "adaptive attack resilience"};
      for (auto peft : pefts) {
        const auto c = p.cell(AttackKind::adaptive_por, peft, false, false, nullptr);
        const double after = mean(asr_of(c.defended));
        const double drop = mean(cacc_of(c.undefended)) - mean(cacc_of(c.defended));
        v.require(after <= 0.35 && drop <= 0.05, "adaptive_por/" + to_string(peft) + ": undefended asr_any " +
                                                     fmt(mean(asr_of(c.undefended))) + ", defended " + fmt(after) +
                                                     " (<= 0.35), CACC drop " + fmt(100 * drop, 3) + " pts (<= 5)");
      }
      record(v);
    }
    runs = p.runs;
    fingerprints_held = base_fingerprint(p.clean) == clean_hash;
    for (auto& [kind, a] : p.attacks) {
      fingerprints_held = fingerprints_held && base_fingerprint(a.params) == a.fingerprint;
    }
  }
  if (wanted(6)) record(criterion_freeze(self, runs, fingerprints_held));

  std::error_code ec;
  fs::remove_all(scratch, ec);
  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  std::cout << "\nsummary\n";
  std::size_t failed = 0;
  for (const auto& v : verdicts) {
    std::cout << (v.pass ? "PASS" : "FAIL") << " " << v.id << " " << v.title << "\n";
    failed += v.pass ? 0 : 1;
  }
  std::cout << verdicts.size() - failed << "/" << verdicts.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
