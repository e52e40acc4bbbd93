#include "bdw/pipeline.hpp"

#include <algorithm>
#include <iostream>
#include <stdexcept>

namespace bdw {

namespace {

constexpr std::uint64_t kTagPretrain = 0x9e7a;
constexpr std::uint64_t kTagAttack = 0xa7ac;
constexpr std::uint64_t kTagCorpus = 1;
constexpr std::uint64_t kTagHeldout = 2;
constexpr std::uint64_t kTagAsr = 0xa5;
constexpr std::uint64_t kTagPoison = 0x3092;
constexpr std::uint64_t kTagProbe = 0x9b0e;

}  // namespace

Workspace make_workspace(const ExperimentConfig& config) {
  Workspace ws{Vocab::synthetic(config.model.vocab_size), {}};
  ws.task = build_task(ws.vocab, config.task.seed, config.task.config, config.corpus);
  return ws;
}

std::uint64_t pretrain_seed(const ExperimentConfig& config) { return mix_seed(config.seed, kTagPretrain); }
std::uint64_t attack_seed(const ExperimentConfig& config) { return mix_seed(config.seed, kTagAttack); }

PretrainResult run_pretrain(const ExperimentConfig& config, const Vocab& vocab) {
  const auto seed = pretrain_seed(config);
  const auto corpus = build_pretrain_corpus(vocab, mix_seed(seed, kTagCorpus), config.pretrain.corpus_size, config.corpus);
  const auto heldout =
      build_pretrain_corpus(vocab, mix_seed(seed, kTagHeldout), config.pretrain.heldout_size, config.corpus);
  PretrainResult out;
  out.model = pretrain_mlm(config.model, corpus, heldout, vocab, config.pretrain.schedule, seed, &out.log,
                           config.pretrain.objective);
  return out;
}

BackdooredCheckpoint run_attack(const ExperimentConfig& config, const EncoderParams& clean, const Vocab& vocab) {
  if (!config.attack.kind) throw std::invalid_argument("no attack configured");
  AttackConfig ac = config.attack.config;
  ac.kind = *config.attack.kind;
  ac.seed = attack_seed(config);
  const auto corpus = build_pretrain_corpus(vocab, mix_seed(ac.seed, kTagCorpus), ac.corpus_size, config.corpus);
  const auto heldout = build_pretrain_corpus(vocab, mix_seed(ac.seed, kTagHeldout), config.attack.heldout_size, config.corpus);
  return train_attack(clean, corpus, heldout, vocab, ac);
}

nlohmann::json to_json(const AttackProvenance& p) {
  const auto& c = p.config;
  nlohmann::json j{{"stage", "attack"},
                   {"attack", to_string(c.kind)},
                   {"seed", c.seed},
                   {"epochs", c.epochs},
                   {"batch_size", c.batch_size},
                   {"learning_rate", c.learning_rate},
                   {"poison_fraction", c.poison_fraction},
                   {"clean_weight", c.clean_weight},
                   {"target_norm", c.target_norm},
                   {"uor_margin", c.uor_margin},
                   {"uor_push_weight", c.uor_push_weight},
                   {"amplification_weight", c.amplification_weight},
                   {"attention_reg_weight", c.attention_reg_weight},
                   {"corpus_size", c.corpus_size},
                   {"triggers", p.triggers}};
  if (p.targets) {
    j["targets"] = {{"seed", p.targets->seed}, {"norm", p.targets->norm}, {"vectors", p.targets->vectors}};
  }
  return j;
}

nlohmann::json to_json(const AttackDiagnostics& d) {
  nlohmann::json j{{"epoch_loss", d.epoch_loss}, {"clean_drift", d.clean_drift}, {"converged", d.converged}, {"note", d.note}};
  if (d.target_cosine) j["target_cosine"] = *d.target_cosine;
  return j;
}

std::optional<AdversarialTargets> targets_from_json(const nlohmann::json& provenance) {
  if (!provenance.is_object() || !provenance.contains("targets")) return std::nullopt;
  const auto& t = provenance.at("targets");
  AdversarialTargets out;
  t.at("seed").get_to(out.seed);
  t.at("norm").get_to(out.norm);
  t.at("vectors").get_to(out.vectors);
  return out;
}

FinetuneConfig finetune_config(const ExperimentConfig& config, std::uint64_t seed, const DefenseConfig& defense) {
  FinetuneConfig fc;
  fc.peft = config.finetune.peft;
  fc.schedule = config.finetune.schedule();
  fc.defense = defense;
  fc.num_classes = config.task.config.num_classes;
  fc.seed = seed;
  return fc;
}

std::vector<Example> finetune_training_set(const ExperimentConfig& config, const Workspace& ws, std::uint64_t seed) {
  if (config.attack.kind != AttackKind::word_trigger) return ws.task.train;
  return poison_training_set(ws.task.train, ws.vocab, config.attack.trigger_index, config.attack.target_label,
                             config.attack.poison_rate, mix_seed(seed, kTagPoison), config.model.max_seq_len);
}

double validation_cacc(const TunedModel& model, const Workspace& ws) {
  std::vector<Sequence> seqs;
  for (const auto& ex : ws.task.validation) seqs.push_back(ex.tokens);
  return cacc(model.predict(seqs), ws.task.validation);
}

LambdaSelection run_lambda_selection(const ExperimentConfig& config, const EncoderParams& plm, const Workspace& ws,
                                     std::uint64_t seed, std::optional<double> baseline) {
  const auto train = finetune_training_set(config, ws, seed);
  auto score = [&](const DefenseConfig& defense) {
    return validation_cacc(finetune(plm, train, finetune_config(config, seed, defense)), ws);
  };
  if (!baseline) baseline = score(DefenseConfig::none());
  DefenseConfig base = config.defense.config;
  return select_lambdas(config.defense.grid, *baseline, [&](double la, double lr) {
    DefenseConfig d = base;
    d.lambda_amp = la;
    d.lambda_reg = lr;
    return score(d);
  });
}

AsrInstances experiment_asr_set(const ExperimentConfig& config, const Workspace& ws, std::uint64_t seed) {
  return make_asr_set(ws.task.test, ws.vocab, mix_seed(seed, kTagAsr), config.model.max_seq_len);
}

Reference make_reference(const ExperimentConfig& config, const EncoderParams& clean, const Workspace& ws,
                         const AsrInstances& asr, std::uint64_t seed) {
  Reference ref{finetune(clean, ws.task.train, finetune_config(config, seed, DefenseConfig::none())), {}};
  const Predictor pred = [&ref](std::span<const Sequence> s) { return ref.model.predict(s); };
  ref.predictions = predict_all(pred, ws.task.test, asr);
  return ref;
}

std::vector<AttentionProbe> experiment_probes(const ExperimentConfig& config, const Workspace& ws, std::uint64_t seed) {
  const std::size_t n = std::min(config.analysis.probes, ws.task.test.size());
  return make_attention_probes(std::span(ws.task.test).subspan(0, n), ws.vocab, mix_seed(seed, kTagProbe),
                               config.model.max_seq_len);
}

TargetProbes target_probes(std::span<const AttentionProbe> probes, const Vocab& vocab,
                           const AdversarialTargets& targets) {
  TargetProbes out;
  const auto& triggers = vocab.triggers();
  for (const auto& p : probes) {
    const TokenId tok = p.tokens.at(p.trigger_position);
    const auto it = std::find(triggers.begin(), triggers.end(), tok);
    if (it == triggers.end()) throw std::invalid_argument("probe carries no trigger at its recorded position");
    out.sequences.push_back(p.tokens);
    out.references.push_back(targets.vectors.at(static_cast<std::size_t>(it - triggers.begin())));
  }
  return out;
}

AttentionProbe canonical_probe(const ExperimentConfig& config, const Workspace& ws) {
  Example ex;
  if (config.analysis.sentence.empty()) {
    ex = ws.task.test.at(0);
  } else {
    const auto& sp = ws.vocab.special();
    ex.tokens.push_back(sp.cls);
    for (auto id : ws.vocab.encode(config.analysis.sentence)) ex.tokens.push_back(id);
    ex.tokens.push_back(sp.sep);
  }
  const std::size_t pos = std::min<std::size_t>(3, ex.tokens.size() - 1);
  auto poisoned = insert_trigger_at(ex, ws.vocab, 0, pos, config.model.max_seq_len);
  return {poisoned.tokens, pos};
}

nlohmann::json attention_map(const EncoderParams& model, const PeftParams* peft, const Sequence& tokens,
                             const Vocab& vocab) {
  NoGradGuard no_grad;
  const auto trace = forward(model, tokens, peft);
  nlohmann::json keys = nlohmann::json::array();
  for (std::size_t p = 0; p < trace.prefix_len; ++p) keys.push_back("<prefix" + std::to_string(p) + ">");
  for (auto id : tokens) keys.push_back(vocab.token(id));
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < trace.attention.size(); ++l) {
    nlohmann::json heads = nlohmann::json::array();
    for (std::size_t h = 0; h < trace.heads; ++h) {
      std::vector<double> row;
      for (std::size_t k = 0; k < trace.prefix_len + tokens.size(); ++k) row.push_back(trace.attention_at(l, 0, h, 0, k));
      heads.push_back(row);
    }
    layers.push_back(heads);
  }
  return {{"keys", keys}, {"cls_attention", layers}};
}

int run_with_exit_codes(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
  } catch (const FreezeViolation& e) {
    std::cerr << "freeze violation: " << e.what() << "\n";
    return kContractViolation;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
  }
  return kConfigError;
}

std::string defense_label(const DefenseConfig& defense) {
  const bool amp = defense.effective_amp() != 0.0;
  const bool reg = defense.effective_reg() != 0.0;
  if (amp && reg) return "full";
  if (amp) return "amp";
  if (reg) return "reg";
  return "none";
}

std::string attack_label(const ExperimentConfig& config) {
  return config.attack.kind ? to_string(*config.attack.kind) : std::string("none");
}

ExperimentOutcome run_experiment(const ExperimentConfig& config, const EncoderParams& plm, const Workspace& ws,
                                 const Reference& reference, const AsrInstances& asr, std::uint64_t seed,
                                 const DefenseConfig& defense, const EpochHook& hook) {
  const auto train = finetune_training_set(config, ws, seed);
  ExperimentOutcome out{finetune(plm, train, finetune_config(config, seed, defense), hook), {}, {}};
  const Predictor pred = [&out](std::span<const Sequence> s) { return out.model.predict(s); };
  out.report = evaluate(predict_all(pred, ws.task.test, asr), reference.predictions, ws.task.test,
                        config.task.config.num_classes);
  auto& row = out.row;
  row.attack = attack_label(config);
  row.peft = to_string(config.finetune.peft.kind);
  row.defense = defense_label(defense);
  row.seed = seed;
  row.cacc = out.report.cacc;
  row.asr_any = out.report.asr_any;
  row.masr = out.report.masr;
  row.aasr = out.report.aasr;
  row.lambda_amp = defense.effective_amp();
  row.lambda_reg = defense.effective_reg();
  return out;
}

}  // namespace bdw
