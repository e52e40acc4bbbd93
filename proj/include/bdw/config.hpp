#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bdw/attack.hpp"
#include "bdw/corpus.hpp"
#include "bdw/defense.hpp"
#include "bdw/model.hpp"
#include "bdw/peft.hpp"
#include "bdw/training.hpp"

namespace bdw {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PretrainSettings {
  std::size_t corpus_size = 20000;
  std::size_t heldout_size = 500;
  TrainSchedule schedule{3, 32, 1e-3};
  PretrainObjective objective;
};

struct TaskSettings {
  TaskConfig config;
  std::uint64_t seed = 11;
};

struct AttackSettings {
  /// Absent means no attack: the clean model is the PLM.
  std::optional<AttackKind> kind = AttackKind::por;
  AttackConfig config;
  std::size_t heldout_size = 500;
  // word-trigger (fine-tune time) poisoning
  std::size_t trigger_index = 0;
  std::size_t target_label = 0;
  double poison_rate = 0.1;
};

struct FinetuneSettings {
  PeftConfig peft;
  /// 0 selects the per-PEFT default.
  std::size_t epochs = 0;
  std::size_t batch_size = 16;
  /// 0 selects the per-PEFT default.
  double learning_rate = 0.0;

  TrainSchedule schedule() const;
};

/// Epochs and learning rate used when the config leaves them at 0.
TrainSchedule default_finetune_schedule(PeftKind kind);

struct DefenseSettings {
  bool enabled = true;
  /// Pick coefficients with select_lambdas instead of using the fixed values.
  bool select = true;
  DefenseConfig config{5e-3, 5e-2, true, true, 1e-8};
  LambdaGrid grid;
};

struct SweepSettings {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<double> amp_values{0.0, 1e-3, 2e-3, 3e-3, 5e-3};
  std::vector<double> reg_values{0.0, 1e-2, 2e-2, 3e-2, 5e-2};
};

struct AnalysisSettings {
  std::size_t probes = 100;
  std::vector<double> thresholds{1e9, 4.0, 3.0, 2.5, 2.0, 1.5, 1.25, 1.0};
  /// Canonical sentence for the per-token attention map; the first trigger
  /// is inserted after its second word.
  std::string sentence;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs";
  ModelConfig model;
  CorpusConfig corpus;
  PretrainSettings pretrain;
  TaskSettings task;
  AttackSettings attack;
  FinetuneSettings finetune;
  DefenseSettings defense;
  SweepSettings sweep;
  AnalysisSettings analysis;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// INI text with [sections]; every key must be known.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field with its current value, in a form parse_config accepts.
std::string render_config(const ExperimentConfig& config);

}  // namespace bdw
