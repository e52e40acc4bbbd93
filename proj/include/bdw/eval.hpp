#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bdw/attack.hpp"
#include "bdw/corpus.hpp"
#include "bdw/defense.hpp"

#include "json.hpp"

namespace bdw {

using Predictor = std::function<std::vector<std::size_t>(std::span<const Sequence>)>;
using InstancePredictions = std::vector<std::array<std::size_t, kNumTriggers>>;

/// Six triggered copies of every test example. Built once per seed and shared
/// by every model under comparison so insertion positions are not a source of
/// difference between them.
struct AsrInstances {
  std::vector<std::array<Sequence, kNumTriggers>> triggered;
  std::uint64_t seed = 0;

  std::vector<Sequence> flat() const;
};

AsrInstances make_asr_set(std::span<const Example> test, const Vocab& vocab, std::uint64_t seed,
                          std::size_t max_seq_len);

/// Predictions on the clean test inputs and on every triggered instance.
struct PredictionSet {
  std::vector<std::size_t> clean;
  InstancePredictions instances;
};

PredictionSet predict_all(const Predictor& model, std::span<const Example> test, const AsrInstances& asr);

struct AsrCell {
  std::size_t misclassified = 0;
  std::size_t poisoned = 0;

  std::optional<double> rate() const {
    if (poisoned == 0) return std::nullopt;
    return static_cast<double>(misclassified) / static_cast<double>(poisoned);
  }
};

struct MetricsReport {
  double cacc = 0.0;
  double asr_any = 0.0;
  std::size_t asr_any_denominator = 0;
  /// cells[t][l]
  std::vector<std::vector<AsrCell>> cells;
  /// Per trigger: max over defined label cells, absent when all are undefined.
  std::vector<std::optional<double>> asr_t;
  double masr = 0.0;
  double aasr = 0.0;
  std::vector<std::string> warnings;
};

double cacc(std::span<const std::size_t> predictions, std::span<const Example> test);

/// Denominator: samples the benign model classifies correctly when clean.
/// Numerator: those with at least one triggered instance misclassified by the
/// evaluated model. Throws std::domain_error on an empty denominator.
double asr_any(std::span<const std::size_t> benign_clean, const InstancePredictions& evaluated,
               std::span<const Example> test, std::size_t* denominator = nullptr);

/// Cell (t, l): among instances carrying trigger t whose true label is not l
/// and which the benign model predicts correctly, the fraction the evaluated
/// model assigns to l.
std::vector<std::vector<AsrCell>> asr_cells(const InstancePredictions& benign, const InstancePredictions& evaluated,
                                            std::span<const Example> test, std::size_t num_classes);

/// Fills asr_t, masr and aasr from `report.cells`; undefined cells are skipped
/// with a warning.
void summarize_cells(MetricsReport& report);

MetricsReport evaluate(const PredictionSet& evaluated, const PredictionSet& benign, std::span<const Example> test,
                       std::size_t num_classes);

nlohmann::json to_json(const MetricsReport& report);

struct ResultRow {
  std::string attack;
  std::string peft;
  std::string defense;
  std::uint64_t seed = 0;
  double cacc = 0.0;
  double asr_any = 0.0;
  double masr = 0.0;
  double aasr = 0.0;
  double lambda_amp = 0.0;
  double lambda_reg = 0.0;
  std::string status = "ok";
};

std::string csv_header();
std::string csv_row(const ResultRow& row);
nlohmann::json to_json(const ResultRow& row);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Per-layer mean cosine between [CLS] outputs and `references[i]` for probe i.
std::vector<double> layer_similarity(const EncoderParams& model, const PeftParams* peft,
                                     std::span<const Sequence> probes, std::span<const std::vector<double>> references);

/// Final-layer [CLS] outputs of a model on each probe.
std::vector<std::vector<double>> final_cls(const EncoderParams& model, const PeftParams* peft,
                                           std::span<const Sequence> probes);

struct SimilarityProfile {
  std::vector<double> benign;
  std::vector<double> backdoored;
  std::vector<double> defended;
};

nlohmann::json to_json(const SimilarityProfile& profile);

/// Triggered probe inputs with the position of their trigger token.
struct AttentionProbe {
  Sequence tokens;
  std::size_t trigger_position;
};

std::vector<AttentionProbe> make_attention_probes(std::span<const Example> source, const Vocab& vocab,
                                                  std::uint64_t seed, std::size_t max_seq_len);

struct AttentionGap {
  double trigger = 0.0;
  double normal = 0.0;
  double ratio() const { return normal > 0.0 ? trigger / normal : 0.0; }
};

/// Final-layer [CLS]-row attention (mean over heads) on the trigger token versus
/// ordinary tokens ([CLS]/[SEP] and prefix columns excluded).
AttentionGap attention_gap(const EncoderParams& model, const PeftParams* peft, std::span<const AttentionProbe> probes);

struct DynamicsEntry {
  std::size_t epoch = 0;
  double peft_norm = 0.0;
  double encoder_norm = 0.0;
  double trigger_attention = 0.0;
  double normal_attention = 0.0;
  std::optional<double> cacc;
  std::optional<double> asr;
};

struct DynamicsLog {
  std::vector<DynamicsEntry> entries;
};

nlohmann::json to_json(const DynamicsLog& log);

struct DynamicsProbe {
  std::vector<AttentionProbe> attention;
  /// Optional metric tracking; leave `test` empty to skip it.
  std::span<const Example> test;
  const AsrInstances* asr = nullptr;
  const PredictionSet* benign = nullptr;
};

/// Epoch hook that appends one DynamicsEntry per call.
EpochHook track_dynamics(DynamicsLog& log, DynamicsProbe probe);

struct ThresholdPoint {
  double threshold;
  double cacc;
  double asr;
  double mean_removed;
};

/// CACC/ASR trade-off of attention-threshold token filtering.
std::vector<ThresholdPoint> attention_threshold_baseline(const TunedModel& model, const PredictionSet& benign,
                                                         std::span<const Example> test, const AsrInstances& asr,
                                                         std::span<const double> thresholds);

}  // namespace bdw
