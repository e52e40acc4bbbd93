#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bdw/corpus.hpp"
#include "bdw/defense.hpp"
#include "bdw/model.hpp"

namespace bdw {

enum class AttackKind { por, neuba, badpre, uor, word_trigger, adaptive_por };

AttackKind parse_attack_kind(const std::string& name);
std::string to_string(AttackKind kind);
/// True for attacks that pull triggered [CLS] outputs onto fixed vectors.
bool uses_targets(AttackKind kind);

/// One fixed vector per trigger, mutually orthogonal, all of norm `norm`.
struct AdversarialTargets {
  std::vector<std::vector<double>> vectors;
  std::uint64_t seed = 0;
  double norm = 0.0;

  std::size_t count() const { return vectors.size(); }
  /// [count, d] tensor of the vectors.
  Tensor matrix() const;
};

/// Orthonormalizes seeded Gaussian draws (modified Gram-Schmidt with a second
/// pass) and scales them to `norm`. Throws std::invalid_argument when m > d.
AdversarialTargets por2_targets(std::size_t m, std::size_t d, double norm, std::uint64_t seed);

struct AttackConfig {
  AttackKind kind = AttackKind::por;
  std::size_t epochs = 6;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double poison_fraction = 0.5;
  /// Weight of the clean-preservation terms.
  double clean_weight = 1.0;
  /// Target vector norm; 0 calibrates to the clean model's mean [CLS] norm.
  double target_norm = 0.0;
  double uor_margin = 0.2;
  double uor_push_weight = 1.0;
  double amplification_weight = 0.0;
  double attention_reg_weight = 0.0;
  std::size_t corpus_size = 8000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AttackDiagnostics {
  std::vector<double> epoch_loss;
  /// Mean cosine between held-out poisoned [CLS] outputs and their targets
  /// (target-based attacks only).
  std::optional<double> target_cosine;
  /// Mean relative [CLS] drift on clean held-out inputs.
  double clean_drift = 0.0;
  bool converged = true;
  std::string note;
};

struct AttackProvenance {
  AttackConfig config;
  std::vector<TokenId> triggers;
  std::optional<AdversarialTargets> targets;
};

struct BackdooredCheckpoint {
  EncoderParams params;
  AttackProvenance provenance;
  AttackDiagnostics diagnostics;
};

/// Mean L2 norm of the final [CLS] output over `sequences`.
double mean_cls_norm(const EncoderParams& params, std::span<const Sequence> sequences);

/// A sequence with one trigger inserted, and which trigger it carries.
struct PoisonedSequence {
  Sequence tokens;
  std::size_t trigger;
};

/// Inserts a uniformly chosen trigger at a uniform interior position.
PoisonedSequence poison_sequence(const Sequence& clean, const Vocab& vocab, Rng& rng, std::size_t max_seq_len);

/// Trains a backdoor into a copy of `clean`; dispatches on config.kind.
/// `heldout` feeds the post-training diagnostics only.
BackdooredCheckpoint train_attack(const EncoderParams& clean, std::span<const Sequence> corpus,
                                  std::span<const Sequence> heldout, const Vocab& vocab, const AttackConfig& config);

BackdooredCheckpoint train_por(const EncoderParams& clean, std::span<const Sequence> corpus,
                               std::span<const Sequence> heldout, const Vocab& vocab,
                               const AdversarialTargets& targets, const AttackConfig& config);
BackdooredCheckpoint train_neuba(const EncoderParams& clean, std::span<const Sequence> corpus,
                                 std::span<const Sequence> heldout, const Vocab& vocab,
                                 const AdversarialTargets& targets, const AttackConfig& config);
BackdooredCheckpoint train_badpre(const EncoderParams& clean, std::span<const Sequence> corpus,
                                  std::span<const Sequence> heldout, const Vocab& vocab, const AttackConfig& config);
/// Contrastive variant ("UOR-lite"): triggered outputs are pulled together per
/// trigger and pushed away from clean outputs and other triggers by a
/// cosine hinge.
BackdooredCheckpoint train_uor(const EncoderParams& clean, std::span<const Sequence> corpus,
                               std::span<const Sequence> heldout, const Vocab& vocab, const AttackConfig& config);
/// POR plus base-weight amplification and attention flattening on triggered inputs.
BackdooredCheckpoint train_adaptive_por(const EncoderParams& clean, std::span<const Sequence> corpus,
                                        std::span<const Sequence> heldout, const Vocab& vocab,
                                        const AdversarialTargets& targets, const AttackConfig& config);

/// Classic data poisoning at fine-tune time: `poison_rate` of the training
/// samples get `trigger_index` inserted and their label set to `target_label`.
std::vector<Example> poison_training_set(std::span<const Example> train, const Vocab& vocab,
                                         std::size_t trigger_index, std::size_t target_label, double poison_rate,
                                         std::uint64_t seed, std::size_t max_seq_len);

TunedModel train_word_trigger_task_specific(const EncoderParams& backbone, const DatasetBundle& task,
                                            const Vocab& vocab, std::size_t trigger_index, std::size_t target_label,
                                            double poison_rate, const FinetuneConfig& config);

}  // namespace bdw
