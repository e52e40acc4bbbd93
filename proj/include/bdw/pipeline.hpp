#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "bdw/attack.hpp"
#include "bdw/checkpoint.hpp"
#include "bdw/config.hpp"
#include "bdw/defense.hpp"
#include "bdw/eval.hpp"

#include "json.hpp"

namespace bdw {

/// Vocabulary and downstream task fixed by a config.
struct Workspace {
  Vocab vocab;
  DatasetBundle task;
};

Workspace make_workspace(const ExperimentConfig& config);

std::uint64_t pretrain_seed(const ExperimentConfig& config);
std::uint64_t attack_seed(const ExperimentConfig& config);

struct PretrainResult {
  EncoderParams model;
  PretrainLog log;
};

PretrainResult run_pretrain(const ExperimentConfig& config, const Vocab& vocab);

/// Weight-level attack on `clean` as configured. Throws std::invalid_argument
/// for word_trigger, which poisons fine-tuning data instead.
BackdooredCheckpoint run_attack(const ExperimentConfig& config, const EncoderParams& clean, const Vocab& vocab);

nlohmann::json to_json(const AttackProvenance& provenance);
nlohmann::json to_json(const AttackDiagnostics& diagnostics);
/// Targets recorded in an attack checkpoint's provenance, if any.
std::optional<AdversarialTargets> targets_from_json(const nlohmann::json& provenance);

FinetuneConfig finetune_config(const ExperimentConfig& config, std::uint64_t seed, const DefenseConfig& defense);

/// Training examples for fine-tuning; poisoned when the attack is word_trigger.
std::vector<Example> finetune_training_set(const ExperimentConfig& config, const Workspace& ws, std::uint64_t seed);

double validation_cacc(const TunedModel& model, const Workspace& ws);

/// Validation CACC of an undefended run, then the grid scan. Pass `baseline`
/// when that undefended run (same config and seed) has already been scored.
LambdaSelection run_lambda_selection(const ExperimentConfig& config, const EncoderParams& plm, const Workspace& ws,
                                     std::uint64_t seed, std::optional<double> baseline = std::nullopt);

/// The benign reference: the clean PLM fine-tuned without defense.
struct Reference {
  TunedModel model;
  PredictionSet predictions;
};

Reference make_reference(const ExperimentConfig& config, const EncoderParams& clean, const Workspace& ws,
                         const AsrInstances& asr, std::uint64_t seed);

AsrInstances experiment_asr_set(const ExperimentConfig& config, const Workspace& ws, std::uint64_t seed);

struct ExperimentOutcome {
  TunedModel model;
  MetricsReport report;
  ResultRow row;
};

/// Fine-tunes `plm` with `defense` and scores it against the benign reference.
ExperimentOutcome run_experiment(const ExperimentConfig& config, const EncoderParams& plm, const Workspace& ws,
                                 const Reference& reference, const AsrInstances& asr, std::uint64_t seed,
                                 const DefenseConfig& defense, const EpochHook& hook = {});

/// Triggered test inputs used by the similarity and attention analyses.
std::vector<AttentionProbe> experiment_probes(const ExperimentConfig& config, const Workspace& ws, std::uint64_t seed);

/// Probe sequences paired with the target vector of the trigger each carries.
struct TargetProbes {
  std::vector<Sequence> sequences;
  std::vector<std::vector<double>> references;
};

TargetProbes target_probes(std::span<const AttentionProbe> probes, const Vocab& vocab,
                           const AdversarialTargets& targets);

/// The analysis sentence (config text, or the first test example) with the
/// first trigger inserted after its second word.
AttentionProbe canonical_probe(const ExperimentConfig& config, const Workspace& ws);

/// Per-layer, per-head [CLS]-row attention over every key of `tokens`.
nlohmann::json attention_map(const EncoderParams& model, const PeftParams* peft, const Sequence& tokens,
                             const Vocab& vocab);

enum ExitCode { kOk = 0, kConfigError = 1, kContractViolation = 2, kPartialFailure = 3 };

/// Runs `body` and maps escaping exceptions to exit codes: FreezeViolation to
/// kContractViolation, everything else to kConfigError. Reports on stderr.
int run_with_exit_codes(const std::function<int()>& body);

/// "none", "full", "amp" or "reg" for the results table.
std::string defense_label(const DefenseConfig& defense);
std::string attack_label(const ExperimentConfig& config);

}  // namespace bdw
