#include "bdw/defense.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace bdw {

void DefenseConfig::validate() const {
  if (!(lambda_amp >= 0.0) || !(lambda_reg >= 0.0)) throw std::invalid_argument("defense coefficients must be >= 0");
  if (!(epsilon >= 0.0)) throw std::invalid_argument("norm smoothing epsilon must be >= 0");
}

Tensor amp_loss(std::span<const Tensor> matrices, double epsilon) {
  if (matrices.empty()) return Tensor::scalar(0.0);
  Tensor total = ops::smoothed_l2_norm(matrices[0], epsilon);
  for (std::size_t i = 1; i < matrices.size(); ++i) total = ops::add(total, ops::smoothed_l2_norm(matrices[i], epsilon));
  return ops::scale(total, -1.0);
}

Tensor amp_loss(const PeftParams& peft, double epsilon) {
  std::vector<Tensor> ws;
  for (auto& m : collect_weight_matrices(peft)) ws.push_back(m.weight);
  return amp_loss(ws, epsilon);
}

Tensor reg_loss(const ForwardTrace& trace, std::span<const std::size_t> sequences, double epsilon) {
  if (trace.attention.empty()) throw std::invalid_argument("trace has no attention maps");
  if (sequences.empty()) throw std::invalid_argument("reg_loss needs at least one sequence");
  std::vector<std::size_t> rows;
  rows.reserve(sequences.size() * trace.heads);
  for (auto b : sequences) {
    if (b >= trace.batch) throw std::out_of_range("sequence index outside the traced batch");
    for (std::size_t h = 0; h < trace.heads; ++h) rows.push_back((b * trace.heads + h) * trace.seq_len);
  }
  Tensor total;
  for (const auto& probs : trace.attention) {
    if (probs.rows() != trace.batch * trace.heads * trace.seq_len) throw std::invalid_argument("malformed attention map");
    Tensor layer = ops::sum(ops::row_norms(ops::gather_rows(probs, rows), epsilon));
    total = total.defined() ? ops::add(total, layer) : layer;
  }
  return ops::scale(total, 1.0 / static_cast<double>(sequences.size()));
}

Tensor reg_loss(const ForwardTrace& trace, double epsilon) {
  std::vector<std::size_t> all(trace.batch);
  for (std::size_t b = 0; b < trace.batch; ++b) all[b] = b;
  return reg_loss(trace, all, epsilon);
}

Tensor total_loss(const Tensor& task, const Tensor* amp, const Tensor* reg, const DefenseConfig& config) {
  Tensor out = task;
  if (config.effective_amp() != 0.0) {
    if (!amp) throw std::invalid_argument("amplification term missing");
    out = ops::add(out, ops::scale(*amp, config.effective_amp()));
  }
  if (config.effective_reg() != 0.0) {
    if (!reg) throw std::invalid_argument("attention term missing");
    out = ops::add(out, ops::scale(*reg, config.effective_reg()));
  }
  return out;
}

std::vector<std::size_t> predict(const EncoderParams& model, const PeftParams* peft,
                                 std::span<const Sequence> sequences) {
  NoGradGuard no_grad;
  constexpr std::size_t kChunk = 64;
  std::vector<std::size_t> out;
  out.reserve(sequences.size());
  for (std::size_t start = 0; start < sequences.size(); start += kChunk) {
    const auto chunk = sequences.subspan(start, std::min(kChunk, sequences.size() - start));
    const auto trace = forward(model, Batch::pack(chunk, model.config.special.pad), peft);
    const auto logits = classify(model, trace);
    const std::size_t c = logits.cols();
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      auto row = logits.values().subspan(r * c, c);
      out.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

std::vector<std::size_t> TunedModel::predict(std::span<const Sequence> sequences) const {
  return bdw::predict(model, &peft, sequences);
}

TunedModel finetune(const EncoderParams& base, std::span<const Example> train, const FinetuneConfig& config,
                    const EpochHook& hook) {
  config.peft.validate(base.config);
  config.defense.validate();
  if (train.empty()) throw std::invalid_argument("empty training set");
  for (const auto& ex : train) {
    if (ex.label >= config.num_classes) throw std::invalid_argument("training label outside the class range");
  }
  const auto before = base_fingerprint(base);

  TunedModel tuned{base, attach(config.peft, base.config, mix_seed(config.seed, 0xae7))};
  tuned.model.set_base_trainable(false);
  tuned.model.head = ClassifierHead::init(base.config.hidden_dim, config.num_classes, mix_seed(config.seed, 0x4ead));
  auto trainable = tuned.peft.tensors();
  for (auto& [name, t] : tuned.model.head->named()) trainable.push_back(t);
  for (auto& t : trainable) t.set_requires_grad(true);
  std::vector<Tensor> amp_matrices;
  for (auto& m : collect_weight_matrices(tuned.peft)) amp_matrices.push_back(m.weight);

  Optimizer opt({OptimizerKind::adam, config.schedule.learning_rate});
  Rng rng = Rng::derive(config.seed, 0xf17e);
  if (hook) hook(0, tuned);
  for (std::size_t epoch = 1; epoch <= config.schedule.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(train.size(), config.schedule.batch_size, rng)) {
      std::vector<Sequence> seqs;
      std::vector<std::size_t> labels;
      for (auto i : idx) {
        seqs.push_back(train[i].tokens);
        labels.push_back(train[i].label);
      }
      const auto trace = forward(tuned.model, Batch::pack(seqs, base.config.special.pad), &tuned.peft);
      Tensor task = ops::cross_entropy(classify(tuned.model, trace), labels);
      std::optional<Tensor> amp, reg;
      if (config.defense.effective_amp() != 0.0) amp = amp_loss(amp_matrices, config.defense.epsilon);
      if (config.defense.effective_reg() != 0.0) reg = reg_loss(trace, config.defense.epsilon);
      Tensor loss = total_loss(task, amp ? &*amp : nullptr, reg ? &*reg : nullptr, config.defense);
      backward(loss);
      opt.step(trainable);
    }
    if (hook) hook(epoch, tuned);
  }
  for (auto& t : trainable) t.set_requires_grad(false);
  if (base_fingerprint(base) != before) throw FreezeViolation("base encoder parameters changed during fine-tuning");
  return tuned;
}

void LambdaGrid::validate() const {
  if (amp.empty() || reg.empty()) throw std::invalid_argument("lambda grid is empty");
  if (!std::is_sorted(amp.begin(), amp.end()) || !std::is_sorted(reg.begin(), reg.end())) {
    throw std::invalid_argument("lambda grid candidates must be sorted ascending");
  }
  if (!(max_drop > 0.0 && max_drop < 1.0)) throw std::invalid_argument("max CACC drop must lie in (0, 1)");
}

LambdaSelection select_lambdas(const LambdaGrid& grid, double baseline_cacc, const LambdaTrainFn& train_fn) {
  grid.validate();
  LambdaSelection sel;
  sel.baseline_cacc = baseline_cacc;
  const double floor = (1.0 - grid.max_drop) * baseline_cacc;
  auto scan = [&](const std::vector<double>& values, bool amp, bool& fallback) {
    for (auto it = values.rbegin(); it != values.rend(); ++it) {
      const double la = amp ? *it : grid.amp.front();
      const double lr = amp ? grid.reg.front() : *it;
      const double cacc = train_fn(la, lr);
      sel.trials.push_back({la, lr, cacc});
      if (cacc >= floor) return *it;
    }
    fallback = true;
    std::cerr << "warning: no " << (amp ? "lambda_amp" : "lambda_reg")
              << " candidate within the CACC bound; using the smallest\n";
    return values.front();
  };
  sel.lambda_amp = scan(grid.amp, true, sel.amp_fallback);
  sel.lambda_reg = scan(grid.reg, false, sel.reg_fallback);
  return sel;
}

Sequence filter_by_attention(const TunedModel& model, const Sequence& sequence, double threshold,
                             std::size_t* removed) {
  const auto& sp = model.model.config.special;
  if (std::isinf(threshold)) {
    if (removed) *removed = 0;
    return sequence;
  }
  NoGradGuard no_grad;
  const auto trace = forward(model.model, sequence, &model.peft);
  const std::size_t n = sequence.size();
  std::vector<double> score(n, 0.0);
  for (std::size_t l = 0; l < trace.attention.size(); ++l) {
    for (std::size_t h = 0; h < trace.heads; ++h) {
      for (std::size_t j = 0; j < n; ++j) score[j] += trace.attention_at(l, 0, h, 0, trace.prefix_len + j);
    }
  }
  double mean = 0.0;
  for (double s : score) mean += s;
  mean /= static_cast<double>(n);
  Sequence out;
  std::size_t dropped = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const bool keep = sequence[j] == sp.cls || sequence[j] == sp.sep || score[j] <= threshold * mean;
    if (keep) {
      out.push_back(sequence[j]);
    } else {
      ++dropped;
    }
  }
  if (removed) *removed = dropped;
  return out;
}

}  // namespace bdw
