#include "bdw/attack.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>

namespace bdw {

namespace {

constexpr std::uint64_t kTagLoop = 0xa77a;
constexpr std::uint64_t kTagDiagnostics = 0xd1a9;

Tensor accumulate(const Tensor& total, const Tensor& term) { return total.defined() ? ops::add(total, term) : term; }

Tensor squared_distance_mean(const Tensor& a, const Tensor& b) {
  Tensor diff = ops::sub(a, b);
  return ops::scale(ops::sum(ops::mul(diff, diff)), 1.0 / static_cast<double>(a.rows()));
}

std::vector<std::size_t> iota(std::size_t begin, std::size_t count) {
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = begin + i;
  return out;
}

/// Final [CLS] rows of `params` on `sequences`, computed without recording.
Tensor reference_cls(const EncoderParams& params, std::span<const Sequence> sequences) {
  NoGradGuard no_grad;
  auto trace = forward(params, Batch::pack(sequences, params.config.special.pad));
  return trace.cls().clone();
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb + 1e-300);
}

struct BatchView {
  std::span<const PoisonedSequence> poisoned;
  std::span<const Sequence> clean;
};

using BatchLoss = std::function<Tensor(const EncoderParams& params, const BatchView& batch, Rng& rng)>;

EncoderParams run_attack_loop(const EncoderParams& clean, std::span<const Sequence> corpus, const Vocab& vocab,
                              const AttackConfig& config, const BatchLoss& loss_fn, AttackDiagnostics& diag) {
  if (corpus.empty()) throw std::invalid_argument("attack corpus is empty");
  auto params = clean.clone();
  params.head.reset();
  params.set_base_trainable(true);
  auto trainable = params.base_tensors();
  Optimizer opt({OptimizerKind::adam, config.learning_rate});
  Rng rng = Rng::derive(config.seed, kTagLoop);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double total = 0.0;
    std::size_t steps = 0;
    for (const auto& idx : epoch_batches(corpus.size(), config.batch_size, rng)) {
      const auto n_poison = static_cast<std::size_t>(std::llround(config.poison_fraction * static_cast<double>(idx.size())));
      std::vector<PoisonedSequence> poisoned;
      std::vector<Sequence> plain;
      for (std::size_t k = 0; k < idx.size(); ++k) {
        if (k < n_poison) {
          poisoned.push_back(poison_sequence(corpus[idx[k]], vocab, rng, clean.config.max_seq_len));
        } else {
          plain.push_back(corpus[idx[k]]);
        }
      }
      Tensor loss = loss_fn(params, BatchView{poisoned, plain}, rng);
      if (!loss.defined()) continue;
      total += loss.item();
      ++steps;
      backward(loss);
      opt.step(trainable);
    }
    diag.epoch_loss.push_back(steps ? total / static_cast<double>(steps) : 0.0);
  }
  params.set_base_trainable(false);
  return params;
}

/// The clean pretraining objective (MLM plus the [CLS] summary term) on the
/// batch entries starting at `first_entry`.
Tensor pretraining_loss(const EncoderParams& params, const ForwardTrace& trace, const Batch& packed,
                        std::span<const MaskedSequence> masked, std::span<const Sequence> originals,
                        std::size_t first_entry, const Vocab& vocab) {
  std::vector<std::size_t> rows, targets;
  masked_rows(masked, packed.seq_len, first_entry, rows, targets);
  Tensor loss = summary_loss(params, trace, originals, vocab, first_entry);
  if (!rows.empty()) loss = ops::add(loss, ops::cross_entropy(mlm_logits(params, trace, rows), targets));
  return loss;
}

/// Held-out poisoned copies with a fixed insertion stream.
std::vector<PoisonedSequence> heldout_poisoned(std::span<const Sequence> heldout, const Vocab& vocab,
                                               std::uint64_t seed, std::size_t max_seq_len) {
  Rng rng = Rng::derive(seed, kTagDiagnostics);
  std::vector<PoisonedSequence> out;
  for (const auto& s : heldout) out.push_back(poison_sequence(s, vocab, rng, max_seq_len));
  return out;
}

void fill_diagnostics(const EncoderParams& clean, const EncoderParams& attacked, std::span<const Sequence> heldout,
                      const Vocab& vocab, const AttackConfig& config, const AdversarialTargets* targets,
                      double threshold, AttackDiagnostics& diag) {
  if (heldout.empty()) {
    diag.note = "no held-out sequences; diagnostics skipped";
    return;
  }
  NoGradGuard no_grad;
  const auto ref = reference_cls(clean, heldout);
  const auto now = reference_cls(attacked, heldout);
  const std::size_t d = ref.cols();
  double drift = 0.0;
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double r = ref.at(i, j);
      num += (now.at(i, j) - r) * (now.at(i, j) - r);
      den += r * r;
    }
    drift += std::sqrt(num / den);
  }
  diag.clean_drift = drift / static_cast<double>(heldout.size());
  if (!targets) return;
  const auto poisoned = heldout_poisoned(heldout, vocab, config.seed, clean.config.max_seq_len);
  std::vector<Sequence> seqs;
  for (const auto& p : poisoned) seqs.push_back(p.tokens);
  const auto cls = reference_cls(attacked, seqs);
  double cos = 0.0;
  for (std::size_t i = 0; i < poisoned.size(); ++i) {
    cos += cosine(cls.values().subspan(i * d, d), targets->vectors[poisoned[i].trigger]);
  }
  diag.target_cosine = cos / static_cast<double>(poisoned.size());
  diag.converged = *diag.target_cosine > threshold;
  if (!diag.converged) {
    diag.note = "held-out target cosine " + std::to_string(*diag.target_cosine) + " below " + std::to_string(threshold);
  }
}

AdversarialTargets resolve_targets(const EncoderParams& clean, std::span<const Sequence> heldout,
                                   std::span<const Sequence> corpus, const AttackConfig& config) {
  double norm = config.target_norm;
  if (norm == 0.0) {
    const auto probe = heldout.empty() ? corpus.subspan(0, std::min<std::size_t>(corpus.size(), 256)) : heldout;
    norm = mean_cls_norm(clean, probe);
  }
  return por2_targets(kNumTriggers, clean.config.hidden_dim, norm, mix_seed(config.seed, 0x7a6));
}

std::vector<TokenId> trigger_list(const Vocab& vocab) { return {vocab.triggers().begin(), vocab.triggers().end()}; }

BackdooredCheckpoint finish(const EncoderParams& clean, EncoderParams attacked, std::span<const Sequence> heldout,
                            const Vocab& vocab, const AttackConfig& config, const AdversarialTargets* targets,
                            double threshold, AttackDiagnostics diag) {
  fill_diagnostics(clean, attacked, heldout, vocab, config, targets, threshold, diag);
  AttackProvenance prov{config, trigger_list(vocab), std::nullopt};
  if (targets) prov.targets = *targets;
  return {std::move(attacked), std::move(prov), std::move(diag)};
}

/// POR objective, optionally with the adaptive extras.
BatchLoss por_objective(const EncoderParams& clean, const Vocab& vocab, const AdversarialTargets& targets,
                        const AttackConfig& config) {
  const Tensor target_matrix = targets.matrix();
  return [&clean, &vocab, &config, target_matrix](const EncoderParams& params, const BatchView& batch, Rng& rng) {
    const std::size_t P = batch.poisoned.size();
    std::vector<Sequence> seqs;
    std::vector<std::size_t> trig;
    for (const auto& p : batch.poisoned) {
      seqs.push_back(p.tokens);
      trig.push_back(p.trigger);
    }
    std::vector<MaskedSequence> masked;
    std::vector<Sequence> clean_inputs;
    const bool preserve = config.clean_weight > 0.0 && !batch.clean.empty();
    if (preserve) {
      for (const auto& c : batch.clean) {
        masked.push_back(mask_for_mlm(c, vocab, rng));
        clean_inputs.push_back(masked.back().tokens);
        seqs.push_back(masked.back().tokens);
      }
    }
    Tensor loss;
    if (seqs.empty()) return loss;
    const auto packed = Batch::pack(seqs, params.config.special.pad);
    const auto trace = forward(params, packed);
    if (P > 0) {
      loss = squared_distance_mean(ops::gather_rows(trace.cls(), iota(0, P)), ops::gather_rows(target_matrix, trig));
    }
    if (preserve) {
      const std::size_t C = masked.size();
      Tensor drift = squared_distance_mean(ops::gather_rows(trace.cls(), iota(P, C)), reference_cls(clean, clean_inputs));
      std::vector<std::size_t> rows, targets;
      masked_rows(masked, packed.seq_len, P, rows, targets);
      Tensor term = drift;
      if (!rows.empty()) term = ops::add(term, ops::cross_entropy(mlm_logits(params, trace, rows), targets));
      loss = accumulate(loss, ops::scale(term, config.clean_weight));
    }
    if (config.amplification_weight > 0.0) {
      loss = accumulate(loss, ops::scale(amp_loss(params.encoder_matrices()), config.amplification_weight));
    }
    if (config.attention_reg_weight > 0.0 && P > 0) {
      loss = accumulate(loss, ops::scale(reg_loss(trace, iota(0, P)), config.attention_reg_weight));
    }
    return loss;
  };
}

}  // namespace

AttackKind parse_attack_kind(const std::string& name) {
  if (name == "por") return AttackKind::por;
  if (name == "neuba") return AttackKind::neuba;
  if (name == "badpre") return AttackKind::badpre;
  if (name == "uor") return AttackKind::uor;
  if (name == "word_trigger") return AttackKind::word_trigger;
  if (name == "adaptive_por") return AttackKind::adaptive_por;
  throw std::invalid_argument("unknown attack kind '" + name + "'");
}

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::por: return "por";
    case AttackKind::neuba: return "neuba";
    case AttackKind::badpre: return "badpre";
    case AttackKind::uor: return "uor";
    case AttackKind::word_trigger: return "word_trigger";
    case AttackKind::adaptive_por: return "adaptive_por";
  }
  return "unknown";
}

bool uses_targets(AttackKind kind) {
  return kind == AttackKind::por || kind == AttackKind::neuba || kind == AttackKind::adaptive_por;
}

Tensor AdversarialTargets::matrix() const {
  if (vectors.empty()) throw std::logic_error("no target vectors");
  std::vector<double> flat;
  for (const auto& v : vectors) flat.insert(flat.end(), v.begin(), v.end());
  return Tensor::from({vectors.size(), vectors[0].size()}, std::move(flat));
}

AdversarialTargets por2_targets(std::size_t m, std::size_t d, double norm, std::uint64_t seed) {
  if (m == 0 || d == 0) throw std::invalid_argument("target count and dimension must be positive");
  if (m > d) throw std::invalid_argument("cannot build more orthogonal targets than the dimension");
  if (!(norm > 0.0)) throw std::invalid_argument("target norm must be positive");
  Rng rng = Rng::derive(seed, 0x90f2);
  AdversarialTargets out;
  out.seed = seed;
  out.norm = norm;
  while (out.vectors.size() < m) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal(1.0);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& u : out.vectors) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += v[i] * u[i];
        for (std::size_t i = 0; i < d; ++i) v[i] -= dot * u[i];
      }
    }
    double len = 0.0;
    for (double x : v) len += x * x;
    len = std::sqrt(len);
    if (len < 1e-6) continue;  // draw fell into the span; redraw
    for (auto& x : v) x /= len;
    out.vectors.push_back(std::move(v));
  }
  for (auto& v : out.vectors) {
    for (auto& x : v) x *= norm;
  }
  return out;
}

void AttackConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("attack epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("attack batch size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("attack learning rate must be positive");
  if (!(poison_fraction >= 0.0 && poison_fraction <= 0.5)) throw std::invalid_argument("poison fraction must lie in [0, 0.5]");
  if (!(clean_weight >= 0.0) || !(uor_push_weight >= 0.0) || !(amplification_weight >= 0.0) ||
      !(attention_reg_weight >= 0.0) || !(uor_margin >= 0.0)) {
    throw std::invalid_argument("attack weights must be >= 0");
  }
  if (!(target_norm >= 0.0)) throw std::invalid_argument("target norm must be >= 0");
}

double mean_cls_norm(const EncoderParams& params, std::span<const Sequence> sequences) {
  if (sequences.empty()) throw std::invalid_argument("mean_cls_norm needs at least one sequence");
  double total = 0.0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < sequences.size(); start += kChunk) {
    const auto chunk = sequences.subspan(start, std::min(kChunk, sequences.size() - start));
    const auto cls = reference_cls(params, chunk);
    const std::size_t d = cls.cols();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += cls.at(i, j) * cls.at(i, j);
      total += std::sqrt(s);
    }
  }
  return total / static_cast<double>(sequences.size());
}

PoisonedSequence poison_sequence(const Sequence& clean, const Vocab& vocab, Rng& rng, std::size_t max_seq_len) {
  const std::size_t t = rng.uniform_int(0, kNumTriggers - 1);
  Example ex{clean, 0, std::nullopt};
  return {insert_trigger(ex, vocab, t, rng, max_seq_len).tokens, t};
}

BackdooredCheckpoint train_por(const EncoderParams& clean, std::span<const Sequence> corpus,
                               std::span<const Sequence> heldout, const Vocab& vocab,
                               const AdversarialTargets& targets, const AttackConfig& config) {
  config.validate();
  if (targets.count() != kNumTriggers) throw std::invalid_argument("need one target per trigger");
  AttackDiagnostics diag;
  auto attacked = run_attack_loop(clean, corpus, vocab, config, por_objective(clean, vocab, targets, config), diag);
  return finish(clean, std::move(attacked), heldout, vocab, config, &targets, 0.9, std::move(diag));
}

BackdooredCheckpoint train_adaptive_por(const EncoderParams& clean, std::span<const Sequence> corpus,
                                        std::span<const Sequence> heldout, const Vocab& vocab,
                                        const AdversarialTargets& targets, const AttackConfig& config) {
  return train_por(clean, corpus, heldout, vocab, targets, config);
}

BackdooredCheckpoint train_neuba(const EncoderParams& clean, std::span<const Sequence> corpus,
                                 std::span<const Sequence> heldout, const Vocab& vocab,
                                 const AdversarialTargets& targets, const AttackConfig& config) {
  config.validate();
  if (targets.count() != kNumTriggers) throw std::invalid_argument("need one target per trigger");
  const Tensor target_matrix = targets.matrix();
  auto objective = [&vocab, &config, target_matrix](const EncoderParams& params, const BatchView& batch, Rng& rng) {
    std::vector<MaskedSequence> poisoned, plain;
    std::vector<Sequence> seqs;
    for (const auto& p : batch.poisoned) {
      poisoned.push_back(mask_for_mlm(p.tokens, vocab, rng));
      seqs.push_back(poisoned.back().tokens);
    }
    const bool preserve = config.clean_weight > 0.0 && !batch.clean.empty();
    if (preserve) {
      for (const auto& c : batch.clean) {
        plain.push_back(mask_for_mlm(c, vocab, rng));
        seqs.push_back(plain.back().tokens);
      }
    }
    Tensor loss;
    if (seqs.empty()) return loss;
    const auto packed = Batch::pack(seqs, params.config.special.pad);
    const auto trace = forward(params, packed);
    if (!poisoned.empty()) {
      std::vector<std::size_t> rows, trig;
      for (std::size_t b = 0; b < poisoned.size(); ++b) {
        rows.push_back(packed.row(b, 0));
        trig.push_back(batch.poisoned[b].trigger);
        for (auto pos : poisoned[b].positions) {
          rows.push_back(packed.row(b, pos));
          trig.push_back(batch.poisoned[b].trigger);
        }
      }
      loss = squared_distance_mean(ops::gather_rows(trace.final_hidden(), rows), ops::gather_rows(target_matrix, trig));
    }
    if (preserve) {
      loss = accumulate(loss, ops::scale(pretraining_loss(params, trace, packed, plain, batch.clean, poisoned.size(), vocab),
                                         config.clean_weight));
    }
    return loss;
  };
  AttackDiagnostics diag;
  auto attacked = run_attack_loop(clean, corpus, vocab, config, objective, diag);
  return finish(clean, std::move(attacked), heldout, vocab, config, &targets, 0.8, std::move(diag));
}

BackdooredCheckpoint train_badpre(const EncoderParams& clean, std::span<const Sequence> corpus,
                                  std::span<const Sequence> heldout, const Vocab& vocab, const AttackConfig& config) {
  config.validate();
  auto objective = [&vocab, &config](const EncoderParams& params, const BatchView& batch, Rng& rng) {
    std::vector<MaskedSequence> poisoned, plain;
    std::vector<Sequence> seqs, scrambled;
    auto random_word = [&] { return static_cast<TokenId>(vocab.first_word() + rng.uniform_int(0, vocab.word_count() - 1)); };
    for (const auto& p : batch.poisoned) {
      auto m = mask_for_mlm(p.tokens, vocab, rng);
      for (auto& t : m.targets) t = random_word();
      Sequence s = p.tokens;
      for (auto& t : s) {
        if (t >= vocab.first_word()) t = random_word();
      }
      scrambled.push_back(std::move(s));
      poisoned.push_back(std::move(m));
      seqs.push_back(poisoned.back().tokens);
    }
    for (const auto& c : batch.clean) {
      plain.push_back(mask_for_mlm(c, vocab, rng));
      seqs.push_back(plain.back().tokens);
    }
    Tensor loss;
    if (seqs.empty()) return loss;
    const auto packed = Batch::pack(seqs, params.config.special.pad);
    const auto trace = forward(params, packed);
    std::vector<std::size_t> rows, targets;
    if (!poisoned.empty()) loss = pretraining_loss(params, trace, packed, poisoned, scrambled, 0, vocab);
    if (!plain.empty() && config.clean_weight > 0.0) {
      loss = accumulate(loss, ops::scale(pretraining_loss(params, trace, packed, plain, batch.clean, poisoned.size(), vocab),
                                         config.clean_weight));
    }
    return loss;
  };
  AttackDiagnostics diag;
  auto attacked = run_attack_loop(clean, corpus, vocab, config, objective, diag);
  return finish(clean, std::move(attacked), heldout, vocab, config, nullptr, 0.0, std::move(diag));
}

BackdooredCheckpoint train_uor(const EncoderParams& clean, std::span<const Sequence> corpus,
                               std::span<const Sequence> heldout, const Vocab& vocab, const AttackConfig& config) {
  config.validate();
  auto objective = [&clean, &vocab, &config](const EncoderParams& params, const BatchView& batch, Rng& rng) {
    const std::size_t P = batch.poisoned.size();
    std::vector<Sequence> seqs;
    for (const auto& p : batch.poisoned) seqs.push_back(p.tokens);
    std::vector<MaskedSequence> masked;
    std::vector<Sequence> clean_inputs;
    for (const auto& c : batch.clean) {
      masked.push_back(mask_for_mlm(c, vocab, rng));
      clean_inputs.push_back(masked.back().tokens);
      seqs.push_back(masked.back().tokens);
    }
    Tensor loss;
    if (seqs.empty()) return loss;
    const auto packed = Batch::pack(seqs, params.config.special.pad);
    const auto trace = forward(params, packed);
    const std::size_t C = masked.size();
    if (P > 0 && config.uor_push_weight > 0.0) {
      Tensor np = ops::normalize_rows(ops::gather_rows(trace.cls(), iota(0, P)));
      Tensor spp = ops::matmul(np, ops::transpose(np));
      std::vector<double> same(P * P, 0.0), other(P * P, 0.0);
      double n_same = 0.0, n_other = 0.0;
      for (std::size_t i = 0; i < P; ++i) {
        for (std::size_t j = 0; j < P; ++j) {
          if (i == j) continue;
          if (batch.poisoned[i].trigger == batch.poisoned[j].trigger) {
            same[i * P + j] = 1.0;
            n_same += 1.0;
          } else {
            other[i * P + j] = 1.0;
            n_other += 1.0;
          }
        }
      }
      Tensor contrast;
      const Tensor margin = Tensor::filled({P, P}, -config.uor_margin);
      if (n_same > 0.0) {
        for (auto& w : same) w /= -n_same;
        contrast = ops::add(Tensor::scalar(1.0), ops::weighted_sum(spp, same));
      }
      if (n_other > 0.0) {
        for (auto& w : other) w /= n_other;
        contrast = accumulate(contrast, ops::weighted_sum(ops::relu(ops::add(spp, margin)), other));
      }
      if (C > 0) {
        Tensor nc;
        {
          NoGradGuard no_grad;
          nc = ops::normalize_rows(ops::gather_rows(trace.cls(), iota(P, C))).clone();
        }
        Tensor spc = ops::matmul(np, ops::transpose(nc));
        contrast = accumulate(contrast, ops::mean(ops::relu(ops::add(spc, Tensor::filled({P, C}, -config.uor_margin)))));
      }
      if (contrast.defined()) loss = ops::scale(contrast, config.uor_push_weight);
    }
    if (C > 0 && config.clean_weight > 0.0) {
      Tensor drift = squared_distance_mean(ops::gather_rows(trace.cls(), iota(P, C)), reference_cls(clean, clean_inputs));
      std::vector<std::size_t> rows, targets;
      masked_rows(masked, packed.seq_len, P, rows, targets);
      Tensor term = drift;
      if (!rows.empty()) term = ops::add(term, ops::cross_entropy(mlm_logits(params, trace, rows), targets));
      loss = accumulate(loss, ops::scale(term, config.clean_weight));
    }
    return loss;
  };
  AttackDiagnostics diag;
  auto attacked = run_attack_loop(clean, corpus, vocab, config, objective, diag);
  return finish(clean, std::move(attacked), heldout, vocab, config, nullptr, 0.0, std::move(diag));
}

BackdooredCheckpoint train_attack(const EncoderParams& clean, std::span<const Sequence> corpus,
                                  std::span<const Sequence> heldout, const Vocab& vocab, const AttackConfig& config) {
  config.validate();
  switch (config.kind) {
    case AttackKind::por:
      return train_por(clean, corpus, heldout, vocab, resolve_targets(clean, heldout, corpus, config), config);
    case AttackKind::adaptive_por:
      return train_adaptive_por(clean, corpus, heldout, vocab, resolve_targets(clean, heldout, corpus, config), config);
    case AttackKind::neuba:
      return train_neuba(clean, corpus, heldout, vocab, resolve_targets(clean, heldout, corpus, config), config);
    case AttackKind::badpre:
      return train_badpre(clean, corpus, heldout, vocab, config);
    case AttackKind::uor:
      return train_uor(clean, corpus, heldout, vocab, config);
    case AttackKind::word_trigger:
      throw std::invalid_argument("word_trigger poisons fine-tuning data; it has no pretraining stage");
  }
  throw std::logic_error("unhandled attack kind");
}

std::vector<Example> poison_training_set(std::span<const Example> train, const Vocab& vocab,
                                         std::size_t trigger_index, std::size_t target_label, double poison_rate,
                                         std::uint64_t seed, std::size_t max_seq_len) {
  if (!(poison_rate >= 0.0 && poison_rate <= 0.5)) throw std::invalid_argument("poison rate must lie in [0, 0.5]");
  if (trigger_index >= kNumTriggers) throw std::out_of_range("trigger index out of range");
  std::vector<Example> out(train.begin(), train.end());
  const auto n = static_cast<std::size_t>(std::llround(poison_rate * static_cast<double>(out.size())));
  if (n == 0) return out;
  Rng rng = Rng::derive(seed, 0x3091);
  std::vector<std::size_t> order = iota(0, out.size());
  rng.shuffle(order);
  for (std::size_t k = 0; k < n; ++k) {
    auto& ex = out[order[k]];
    ex = insert_trigger(ex, vocab, trigger_index, rng, max_seq_len);
    ex.label = target_label;
  }
  return out;
}

TunedModel train_word_trigger_task_specific(const EncoderParams& backbone, const DatasetBundle& task,
                                            const Vocab& vocab, std::size_t trigger_index, std::size_t target_label,
                                            double poison_rate, const FinetuneConfig& config) {
  if (target_label >= task.num_classes) throw std::invalid_argument("target label outside the class range");
  const auto train = poison_training_set(task.train, vocab, trigger_index, target_label, poison_rate,
                                         mix_seed(config.seed, 0x3092), backbone.config.max_seq_len);
  return finetune(backbone, train, config);
}

}  // namespace bdw
