#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "bdw/corpus.hpp"
#include "bdw/model.hpp"
#include "bdw/optim.hpp"
#include "bdw/peft.hpp"

namespace bdw {

struct TrainSchedule {
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
};

struct PretrainObjective {
  /// Weight of the sequence-summary term: the MLM head applied at [CLS]
  /// predicts every ordinary word of the unmasked sequence.
  double summary_weight = 1.0;
};

/// Shuffled index batches covering [0, n) once.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng);

/// Packs masked sequences and returns the MLM cross-entropy over every masked
/// position (mean). `trace_out` receives the forward trace when non-null.
Tensor mlm_loss(const EncoderParams& params, std::span<const MaskedSequence> batch, const PeftParams* peft = nullptr,
                ForwardTrace* trace_out = nullptr);

/// Packed-row indices and targets of the masked positions of `batch` laid out
/// with sequence stride `seq_len`.
void masked_rows(std::span<const MaskedSequence> batch, std::size_t seq_len, std::size_t row_offset,
                 std::vector<std::size_t>& rows, std::vector<std::size_t>& targets);

struct MlmAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double rate() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Top-1 accuracy at masked positions; masks are drawn from `seed` so repeated
/// evaluations of different models see identical masks.
MlmAccuracy mlm_accuracy(const EncoderParams& params, std::span<const Sequence> sequences, const Vocab& vocab,
                         std::uint64_t seed);

struct PretrainLog {
  std::vector<double> epoch_loss;
  double heldout_accuracy = 0.0;
};

/// Bag-of-words cross-entropy of the MLM head at each [CLS] row against the
/// ordinary words of `originals`; originals[i] belongs to batch entry
/// first_entry + i.
Tensor summary_loss(const EncoderParams& params, const ForwardTrace& trace, std::span<const Sequence> originals,
                    const Vocab& vocab, std::size_t first_entry = 0);

/// MLM pretraining of a freshly initialized encoder.
EncoderParams pretrain_mlm(const ModelConfig& config, std::span<const Sequence> corpus,
                           std::span<const Sequence> heldout, const Vocab& vocab, const TrainSchedule& schedule,
                           std::uint64_t seed, PretrainLog* log = nullptr, const PretrainObjective& objective = {});

}  // namespace bdw
