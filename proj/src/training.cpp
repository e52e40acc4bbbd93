#include "bdw/training.hpp"

#include <algorithm>
#include <stdexcept>

namespace bdw {

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

void masked_rows(std::span<const MaskedSequence> batch, std::size_t seq_len, std::size_t row_offset,
                 std::vector<std::size_t>& rows, std::vector<std::size_t>& targets) {
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t k = 0; k < batch[b].positions.size(); ++k) {
      rows.push_back((row_offset + b) * seq_len + batch[b].positions[k]);
      targets.push_back(batch[b].targets[k]);
    }
  }
}

Tensor mlm_loss(const EncoderParams& params, std::span<const MaskedSequence> batch, const PeftParams* peft,
                ForwardTrace* trace_out) {
  std::vector<Sequence> seqs;
  seqs.reserve(batch.size());
  for (const auto& m : batch) seqs.push_back(m.tokens);
  const auto packed = Batch::pack(seqs, params.config.special.pad);
  auto trace = forward(params, packed, peft);
  std::vector<std::size_t> rows, targets;
  masked_rows(batch, packed.seq_len, 0, rows, targets);
  if (rows.empty()) throw std::invalid_argument("MLM batch has no masked positions");
  auto loss = ops::cross_entropy(mlm_logits(params, trace, rows), targets);
  if (trace_out) *trace_out = std::move(trace);
  return loss;
}

MlmAccuracy mlm_accuracy(const EncoderParams& params, std::span<const Sequence> sequences, const Vocab& vocab,
                         std::uint64_t seed) {
  NoGradGuard no_grad;
  Rng rng = Rng::derive(seed, 0xacc);
  MlmAccuracy acc;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < sequences.size(); start += kChunk) {
    const std::size_t end = std::min(sequences.size(), start + kChunk);
    std::vector<MaskedSequence> masked;
    for (std::size_t i = start; i < end; ++i) {
      auto m = mask_for_mlm(sequences[i], vocab, rng);
      if (!m.positions.empty()) masked.push_back(std::move(m));
    }
    if (masked.empty()) continue;
    std::vector<Sequence> seqs;
    for (const auto& m : masked) seqs.push_back(m.tokens);
    const auto packed = Batch::pack(seqs, params.config.special.pad);
    auto trace = forward(params, packed);
    std::vector<std::size_t> rows, targets;
    masked_rows(masked, packed.seq_len, 0, rows, targets);
    auto logits = mlm_logits(params, trace, rows);
    const std::size_t v = logits.cols();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto row = logits.values().subspan(r * v, v);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      acc.correct += best == targets[r] ? 1 : 0;
      ++acc.total;
    }
  }
  return acc;
}

Tensor summary_loss(const EncoderParams& params, const ForwardTrace& trace, std::span<const Sequence> originals,
                    const Vocab& vocab, std::size_t first_entry) {
  if (first_entry + originals.size() > trace.batch) throw std::invalid_argument("more originals than traced batch entries");
  std::vector<std::size_t> rows, targets;
  for (std::size_t b = 0; b < originals.size(); ++b) {
    for (auto tok : originals[b]) {
      if (tok < vocab.first_word()) continue;
      rows.push_back((first_entry + b) * trace.seq_len);
      targets.push_back(tok);
    }
  }
  if (rows.empty()) throw std::invalid_argument("summary loss needs ordinary words");
  return ops::cross_entropy(mlm_logits(params, trace, rows), targets);
}

EncoderParams pretrain_mlm(const ModelConfig& config, std::span<const Sequence> corpus,
                           std::span<const Sequence> heldout, const Vocab& vocab, const TrainSchedule& schedule,
                           std::uint64_t seed, PretrainLog* log, const PretrainObjective& objective) {
  if (vocab.size() != config.vocab_size) throw std::invalid_argument("vocabulary size does not match model config");
  auto params = EncoderParams::init(config, seed);
  params.set_base_trainable(true);
  auto trainable = params.base_tensors();
  Optimizer opt({OptimizerKind::adam, schedule.learning_rate});
  Rng rng = Rng::derive(seed, 0x9e7);
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    double total = 0.0;
    std::size_t steps = 0;
    for (const auto& idx : epoch_batches(corpus.size(), schedule.batch_size, rng)) {
      std::vector<MaskedSequence> batch;
      std::vector<Sequence> originals;
      for (auto i : idx) {
        auto m = mask_for_mlm(corpus[i], vocab, rng);
        if (m.positions.empty()) continue;
        batch.push_back(std::move(m));
        originals.push_back(corpus[i]);
      }
      if (batch.empty()) continue;
      ForwardTrace trace;
      auto loss = mlm_loss(params, batch, nullptr, &trace);
      if (objective.summary_weight > 0.0) {
        loss = ops::add(loss, ops::scale(summary_loss(params, trace, originals, vocab), objective.summary_weight));
      }
      total += loss.item();
      ++steps;
      backward(loss);
      opt.step(trainable);
    }
    if (log) log->epoch_loss.push_back(steps ? total / static_cast<double>(steps) : 0.0);
  }
  params.set_base_trainable(false);
  if (log && !heldout.empty()) log->heldout_accuracy = mlm_accuracy(params, heldout, vocab, seed).rate();
  return params;
}

}  // namespace bdw
