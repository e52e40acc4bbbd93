#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "bdw/pipeline.hpp"

namespace fs = std::filesystem;
using namespace bdw;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string ablate;
  bool no_defense = false;
  std::string plm;
  std::string clean;
};

ExperimentConfig resolve(const Options& opt) {
  ExperimentConfig cfg = opt.config_path.empty() ? ExperimentConfig{} : load_config(opt.config_path);
  if (opt.seed) cfg.seed = *opt.seed;
  if (!opt.out.empty()) cfg.output_dir = opt.out;
  if (opt.no_defense) cfg.defense.enabled = false;
  if (opt.ablate == "amp") cfg.defense.config.amp_enabled = false;
  if (opt.ablate == "reg") cfg.defense.config.reg_enabled = false;
  cfg.validate();
  return cfg;
}

fs::path checkpoint_dir(const ExperimentConfig& cfg) { return cfg.output_dir / "checkpoints"; }
fs::path analysis_dir(const ExperimentConfig& cfg) { return cfg.output_dir / "analysis"; }

fs::path clean_path(const ExperimentConfig& cfg, const Options& opt) {
  return opt.clean.empty() ? checkpoint_dir(cfg) / "clean.ckpt" : fs::path(opt.clean);
}

fs::path plm_path(const ExperimentConfig& cfg, const Options& opt) {
  if (!opt.plm.empty()) return opt.plm;
  if (!cfg.attack.kind || *cfg.attack.kind == AttackKind::word_trigger) return clean_path(cfg, opt);
  return checkpoint_dir(cfg) / (to_string(*cfg.attack.kind) + ".ckpt");
}

EncoderParams load_model(const fs::path& path, nlohmann::json* provenance = nullptr) {
  if (!fs::exists(path)) throw CheckpointError("missing checkpoint " + path.string());
  const auto ckpt = load_checkpoint(path);
  if (provenance) *provenance = ckpt.metadata.value("provenance", nlohmann::json::object());
  auto model = restore_encoder(ckpt);
  model.head.reset();
  return model;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream(path) << j.dump(2) << "\n";
}

void write_results(const ExperimentConfig& cfg, const std::vector<ResultRow>& rows, const nlohmann::json& extra) {
  fs::create_directories(cfg.output_dir);
  std::ofstream csv(cfg.output_dir / "results.csv");
  csv << csv_header() << "\n";
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    csv << csv_row(r) << "\n";
    arr.push_back(to_json(r));
  }
  nlohmann::json j{{"rows", arr}};
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_json(cfg.output_dir / "results.json", j);
}

nlohmann::json selection_json(const LambdaSelection& sel) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : sel.trials) trials.push_back({{"lambda_amp", t.lambda_amp}, {"lambda_reg", t.lambda_reg}, {"cacc", t.cacc}});
  return {{"lambda_amp", sel.lambda_amp},     {"lambda_reg", sel.lambda_reg},     {"baseline_cacc", sel.baseline_cacc},
          {"amp_fallback", sel.amp_fallback}, {"reg_fallback", sel.reg_fallback}, {"trials", trials}};
}

/// Defense coefficients for a run, selecting them first when grid mode is on.
DefenseConfig resolve_defense(const ExperimentConfig& cfg, const EncoderParams& plm, const Workspace& ws,
                              nlohmann::json& log) {
  if (!cfg.defense.enabled) return DefenseConfig::none();
  DefenseConfig d = cfg.defense.config;
  if (cfg.defense.select) {
    const auto sel = run_lambda_selection(cfg, plm, ws, cfg.seed);
    log["lambda_selection"] = selection_json(sel);
    d.lambda_amp = sel.lambda_amp;
    d.lambda_reg = sel.lambda_reg;
  }
  return d;
}

int cmd_show_config(const Options& opt) {
  std::cout << render_config(resolve(opt));
  return kOk;
}

int cmd_pretrain(const Options& opt) {
  const auto cfg = resolve(opt);
  const auto ws = make_workspace(cfg);
  auto result = run_pretrain(cfg, ws.vocab);
  const double chance = 1.0 / static_cast<double>(cfg.model.vocab_size);
  if (result.log.heldout_accuracy <= 5.0 * chance) {
    std::cerr << "warning: held-out MLM accuracy " << result.log.heldout_accuracy << " is not above 5x chance\n";
  }
  nlohmann::json prov{{"stage", "pretrain"}, {"seed", pretrain_seed(cfg)}, {"heldout_accuracy", result.log.heldout_accuracy}};
  const auto path = checkpoint_dir(cfg) / "clean.ckpt";
  save_checkpoint(path, make_checkpoint(result.model, nullptr, prov));
  write_json(cfg.output_dir / "results.json", {{"checkpoint", path.string()}, {"pretrain", {{"epoch_loss", result.log.epoch_loss}, {"heldout_accuracy", result.log.heldout_accuracy}}}});
  std::cout << "held-out MLM accuracy " << result.log.heldout_accuracy << "\nwrote " << path.string() << "\n";
  return kOk;
}

int cmd_attack(const Options& opt) {
  const auto cfg = resolve(opt);
  if (!cfg.attack.kind) throw ConfigError("attack.kind is none");
  if (*cfg.attack.kind == AttackKind::word_trigger) {
    throw ConfigError("word_trigger poisons fine-tuning data; run finetune instead");
  }
  const auto ws = make_workspace(cfg);
  const auto clean = load_model(clean_path(cfg, opt));
  auto ck = run_attack(cfg, clean, ws.vocab);
  auto prov = to_json(ck.provenance);
  prov["diagnostics"] = to_json(ck.diagnostics);
  const auto path = checkpoint_dir(cfg) / (to_string(*cfg.attack.kind) + ".ckpt");
  save_checkpoint(path, make_checkpoint(ck.params, nullptr, prov));
  write_json(cfg.output_dir / "results.json", {{"checkpoint", path.string()}, {"attack", prov}});
  if (!ck.diagnostics.converged) std::cerr << "warning: " << ck.diagnostics.note << "\n";
  std::cout << "clean drift " << ck.diagnostics.clean_drift;
  if (ck.diagnostics.target_cosine) std::cout << ", target cosine " << *ck.diagnostics.target_cosine;
  std::cout << "\nwrote " << path.string() << "\n";
  return kOk;
}

int cmd_finetune(const Options& opt) {
  const auto cfg = resolve(opt);
  const auto ws = make_workspace(cfg);
  const auto clean = load_model(clean_path(cfg, opt));
  nlohmann::json prov;
  const auto plm = load_model(plm_path(cfg, opt), &prov);
  nlohmann::json log;
  const auto defense = resolve_defense(cfg, plm, ws, log);
  const auto asr = experiment_asr_set(cfg, ws, cfg.seed);
  const auto reference = make_reference(cfg, clean, ws, asr, cfg.seed);
  auto out = run_experiment(cfg, plm, ws, reference, asr, cfg.seed, defense);
  for (const auto& w : out.report.warnings) std::cerr << "warning: " << w << "\n";
  nlohmann::json tuned_prov{{"stage", "finetune"},         {"plm", prov},
                            {"peft", to_string(cfg.finetune.peft.kind)}, {"seed", cfg.seed},
                            {"lambda_amp", defense.effective_amp()},     {"lambda_reg", defense.effective_reg()}};
  const auto name = out.row.attack + "-" + out.row.peft + "-" + out.row.defense + "-s" + std::to_string(cfg.seed) + ".ckpt";
  const auto path = checkpoint_dir(cfg) / name;
  save_checkpoint(path, make_checkpoint(out.model.model, &out.model.peft, tuned_prov));
  log["metrics"] = to_json(out.report);
  log["checkpoint"] = path.string();
  write_results(cfg, {out.row}, log);
  std::cout << csv_header() << "\n" << csv_row(out.row) << "\n";
  return kOk;
}

int cmd_sweep(const Options& opt) {
  const auto cfg = resolve(opt);
  const auto ws = make_workspace(cfg);
  const auto clean = load_model(clean_path(cfg, opt));
  const auto plm = load_model(plm_path(cfg, opt));
  std::vector<std::pair<double, double>> grid;
  for (double a : cfg.sweep.amp_values) grid.emplace_back(a, 0.0);
  for (double r : cfg.sweep.reg_values) {
    if (r != 0.0 || cfg.sweep.amp_values.empty()) grid.emplace_back(0.0, r);
  }
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  std::vector<ResultRow> rows;
  bool failed = false;
  for (auto seed : cfg.sweep.seeds) {
    const auto asr = experiment_asr_set(cfg, ws, seed);
    std::optional<Reference> reference;
    for (const auto& [la, lr] : grid) {
      DefenseConfig d = cfg.defense.config;
      d.lambda_amp = la;
      d.lambda_reg = lr;
      if (la == 0.0 && lr == 0.0) d = DefenseConfig::none();
      try {
        if (!reference) reference = make_reference(cfg, clean, ws, asr, seed);
        rows.push_back(run_experiment(cfg, plm, ws, *reference, asr, seed, d).row);
      } catch (const FreezeViolation&) {
        throw;
      } catch (const std::exception& e) {
        failed = true;
        ResultRow row;
        row.attack = attack_label(cfg);
        row.peft = to_string(cfg.finetune.peft.kind);
        row.defense = defense_label(d);
        row.seed = seed;
        row.lambda_amp = d.effective_amp();
        row.lambda_reg = d.effective_reg();
        row.status = std::string("error: ") + e.what();
        rows.push_back(row);
        std::cerr << "sweep point (" << la << ", " << lr << ") seed " << seed << " failed: " << e.what() << "\n";
      }
      std::cout << csv_row(rows.back()) << "\n" << std::flush;
    }
  }
  write_results(cfg, rows, nlohmann::json::object());
  return failed ? kPartialFailure : kOk;
}

int cmd_analyze(const Options& opt) {
  const auto cfg = resolve(opt);
  const auto ws = make_workspace(cfg);
  const auto clean = load_model(clean_path(cfg, opt));
  nlohmann::json prov;
  const auto plm = load_model(plm_path(cfg, opt), &prov);
  const auto targets = targets_from_json(prov);

  nlohmann::json log;
  auto defense = resolve_defense(cfg, plm, ws, log);
  if (!defense.active()) defense = cfg.defense.config;
  const auto asr = experiment_asr_set(cfg, ws, cfg.seed);
  const auto reference = make_reference(cfg, clean, ws, asr, cfg.seed);
  const auto probes = experiment_probes(cfg, ws, cfg.seed);

  DynamicsLog undefended_log, defended_log;
  const DynamicsProbe probe{probes, ws.task.test, &asr, &reference.predictions};
  auto undefended = run_experiment(cfg, plm, ws, reference, asr, cfg.seed, DefenseConfig::none(),
                                   track_dynamics(undefended_log, probe));
  auto defended = run_experiment(cfg, plm, ws, reference, asr, cfg.seed, defense, track_dynamics(defended_log, probe));
  write_json(analysis_dir(cfg) / "dynamics.json",
             {{"undefended", to_json(undefended_log)},
              {"defended", to_json(defended_log)},
              {"lambda_amp", defense.effective_amp()},
              {"lambda_reg", defense.effective_reg()}});

  if (targets) {
    const auto tp = target_probes(probes, ws.vocab, *targets);
    SimilarityProfile profile{layer_similarity(reference.model.model, &reference.model.peft, tp.sequences, tp.references),
                              layer_similarity(undefended.model.model, &undefended.model.peft, tp.sequences, tp.references),
                              layer_similarity(defended.model.model, &defended.model.peft, tp.sequences, tp.references)};
    write_json(analysis_dir(cfg) / "similarity.json", to_json(profile));
  } else {
    std::cerr << "note: the PLM carries no target vectors; similarity.json skipped\n";
  }

  const auto canonical = canonical_probe(cfg, ws);
  write_json(analysis_dir(cfg) / "attention.json",
             {{"trigger_position", canonical.trigger_position},
              {"benign", attention_map(clean, nullptr, canonical.tokens, ws.vocab)},
              {"backdoored", attention_map(plm, nullptr, canonical.tokens, ws.vocab)}});

  const auto curve = attention_threshold_baseline(undefended.model, reference.predictions, ws.task.test, asr,
                                                  cfg.analysis.thresholds);
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : curve) {
    points.push_back({{"threshold", p.threshold}, {"cacc", p.cacc}, {"asr", p.asr}, {"mean_removed", p.mean_removed}});
  }
  write_json(analysis_dir(cfg) / "threshold.json", {{"curve", points}});
  write_results(cfg, {undefended.row, defended.row}, log);
  std::cout << "wrote " << analysis_dir(cfg).string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor injection, PEFT fine-tuning and defense experiments on a micro transformer"};
  app.require_subcommand(1);
  Options opt;
  auto common = [&opt](CLI::App* sub, bool models) {
    sub->add_option("--config", opt.config_path, "experiment config (INI)")->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "override experiment.seed");
    sub->add_option("--out", opt.out, "override experiment.output_dir");
    sub->add_option("--ablate", opt.ablate, "drop one defense term")->check(CLI::IsMember({"amp", "reg"}));
    sub->add_flag("--no-defense", opt.no_defense, "fine-tune without the defense terms");
    if (models) {
      sub->add_option("--plm", opt.plm, "PLM checkpoint (default: checkpoints/<attack>.ckpt)");
      sub->add_option("--clean", opt.clean, "clean PLM checkpoint (default: checkpoints/clean.ckpt)");
    }
  };
  auto* show = app.add_subcommand("show-config", "print the resolved config with every default");
  auto* pretrain = app.add_subcommand("pretrain", "pretrain the clean micro PLM");
  auto* attack = app.add_subcommand("attack", "train a backdoor into the clean PLM");
  auto* finetune = app.add_subcommand("finetune", "PEFT fine-tune a PLM and score it");
  auto* sweep = app.add_subcommand("sweep", "fine-tune over a coefficient grid and seeds");
  auto* analyze = app.add_subcommand("analyze", "similarity, dynamics, attention and threshold series");
  common(show, false);
  common(pretrain, false);
  common(attack, true);
  common(finetune, true);
  common(sweep, true);
  common(analyze, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }
  return run_with_exit_codes([&]() -> int {
    if (*show) return cmd_show_config(opt);
    if (*pretrain) return cmd_pretrain(opt);
    if (*attack) return cmd_attack(opt);
    if (*finetune) return cmd_finetune(opt);
    if (*sweep) return cmd_sweep(opt);
    if (*analyze) return cmd_analyze(opt);
    return kOk;
  });
}
