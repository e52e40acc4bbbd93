#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bdw/corpus.hpp"
#include "bdw/model.hpp"
#include "bdw/peft.hpp"
#include "bdw/training.hpp"

namespace bdw {

struct DefenseConfig {
  double lambda_amp = 0.0;
  double lambda_reg = 0.0;
  bool amp_enabled = true;
  bool reg_enabled = true;
  double epsilon = 1e-8;

  double effective_amp() const { return amp_enabled ? lambda_amp : 0.0; }
  double effective_reg() const { return reg_enabled ? lambda_reg : 0.0; }
  bool active() const { return effective_amp() != 0.0 || effective_reg() != 0.0; }
  void validate() const;
  static DefenseConfig none() { return {0.0, 0.0, false, false, 1e-8}; }
};

/// Negative sum of smoothed Frobenius norms of the PEFT weight matrices.
Tensor amp_loss(const PeftParams& peft, double epsilon = 1e-8);
/// Same quantity over an explicit matrix list.
Tensor amp_loss(std::span<const Tensor> matrices, double epsilon = 1e-8);

/// Sum over layers and heads of the smoothed L2 norm of the [CLS]-query
/// attention row, averaged over the sequences of the batch. [PAD] columns are
/// exactly zero after masking and so do not contribute; prefix columns do.
Tensor reg_loss(const ForwardTrace& trace, double epsilon = 1e-8);
/// Restricted to the listed sequences of the batch.
Tensor reg_loss(const ForwardTrace& trace, std::span<const std::size_t> sequences, double epsilon = 1e-8);

/// task + lambda_amp * amp + lambda_reg * reg; disabled terms are not added at all.
Tensor total_loss(const Tensor& task, const Tensor* amp, const Tensor* reg, const DefenseConfig& config);

/// A tuned classifier: the frozen base (sharing storage with the source
/// model), its PEFT layers and the classification head.
struct TunedModel {
  EncoderParams model;
  PeftParams peft;

  ForwardTrace trace(const Batch& batch) const { return forward(model, batch, &peft); }
  std::vector<std::size_t> predict(std::span<const Sequence> sequences) const;
};

std::vector<std::size_t> predict(const EncoderParams& model, const PeftParams* peft,
                                 std::span<const Sequence> sequences);

struct FinetuneConfig {
  PeftConfig peft;
  TrainSchedule schedule{8, 16, 2e-3};
  DefenseConfig defense = DefenseConfig::none();
  std::size_t num_classes = 4;
  std::uint64_t seed = 0;
};

class FreezeViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Called with epoch 0 before the first update and after every epoch.
using EpochHook = std::function<void(std::size_t epoch, const TunedModel& model)>;

/// PEFT fine-tuning of a frozen base. Only PEFT tensors and the head are
/// updated; a change to any base tensor raises FreezeViolation.
TunedModel finetune(const EncoderParams& base, std::span<const Example> train, const FinetuneConfig& config,
                    const EpochHook& hook = {});

struct LambdaGrid {
  std::vector<double> amp{1e-3, 2e-3, 3e-3, 5e-3};
  std::vector<double> reg{1e-2, 2e-2, 3e-2, 5e-2};
  double max_drop = 0.02;

  void validate() const;
};

struct LambdaTrial {
  double lambda_amp;
  double lambda_reg;
  double cacc;
};

struct LambdaSelection {
  double lambda_amp = 0.0;
  double lambda_reg = 0.0;
  double baseline_cacc = 0.0;
  bool amp_fallback = false;
  bool reg_fallback = false;
  std::vector<LambdaTrial> trials;
};

/// Validation CACC of a run with the given coefficients.
using LambdaTrainFn = std::function<double(double lambda_amp, double lambda_reg)>;

/// Scans each grid from its largest value downwards, the other coefficient
/// held at its grid minimum, and keeps the first value whose validation CACC
/// is at least (1 - max_drop) * baseline. Falls back to the smallest value
/// with a flag when none qualifies.
LambdaSelection select_lambdas(const LambdaGrid& grid, double baseline_cacc, const LambdaTrainFn& train_fn);

/// Drops tokens whose mean [CLS]-row attention (over layers and heads)
/// exceeds threshold x the sequence mean; [CLS] and [SEP] are always kept.
Sequence filter_by_attention(const TunedModel& model, const Sequence& sequence, double threshold,
                             std::size_t* removed = nullptr);

}  // namespace bdw
