#include "bdw/eval.hpp"

#include <algorithm>
#include <cmath>
#include <charconv>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace bdw {

std::vector<Sequence> AsrInstances::flat() const {
  std::vector<Sequence> out;
  out.reserve(triggered.size() * kNumTriggers);
  for (const auto& group : triggered) out.insert(out.end(), group.begin(), group.end());
  return out;
}

AsrInstances make_asr_set(std::span<const Example> test, const Vocab& vocab, std::uint64_t seed,
                          std::size_t max_seq_len) {
  AsrInstances out;
  out.seed = seed;
  Rng rng = Rng::derive(seed, 0xa5a5);
  for (const auto& ex : test) {
    auto instances = make_asr_instances(ex, vocab, rng, max_seq_len);
    std::array<Sequence, kNumTriggers> group;
    for (std::size_t t = 0; t < kNumTriggers; ++t) group[t] = std::move(instances[t].tokens);
    out.triggered.push_back(std::move(group));
  }
  return out;
}

PredictionSet predict_all(const Predictor& model, std::span<const Example> test, const AsrInstances& asr) {
  if (asr.triggered.size() != test.size()) throw std::invalid_argument("ASR instances do not match the test set");
  std::vector<Sequence> clean;
  clean.reserve(test.size());
  for (const auto& ex : test) clean.push_back(ex.tokens);
  PredictionSet out;
  out.clean = model(clean);
  const auto flat = model(asr.flat());
  out.instances.resize(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    for (std::size_t t = 0; t < kNumTriggers; ++t) out.instances[i][t] = flat[i * kNumTriggers + t];
  }
  return out;
}

double cacc(std::span<const std::size_t> predictions, std::span<const Example> test) {
  if (test.empty()) throw std::invalid_argument("CACC of an empty test set");
  if (predictions.size() != test.size()) throw std::invalid_argument("prediction count does not match the test set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) correct += predictions[i] == test[i].label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

double asr_any(std::span<const std::size_t> benign_clean, const InstancePredictions& evaluated,
               std::span<const Example> test, std::size_t* denominator) {
  if (benign_clean.size() != test.size() || evaluated.size() != test.size()) {
    throw std::invalid_argument("prediction count does not match the test set");
  }
  std::size_t den = 0, num = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (benign_clean[i] != test[i].label) continue;
    ++den;
    const bool hit = std::any_of(evaluated[i].begin(), evaluated[i].end(),
                                 [&](std::size_t p) { return p != test[i].label; });
    num += hit ? 1 : 0;
  }
  if (denominator) *denominator = den;
  if (den == 0) throw std::domain_error("benign model classifies no test sample correctly");
  return static_cast<double>(num) / static_cast<double>(den);
}

std::vector<std::vector<AsrCell>> asr_cells(const InstancePredictions& benign, const InstancePredictions& evaluated,
                                            std::span<const Example> test, std::size_t num_classes) {
  if (benign.size() != test.size() || evaluated.size() != test.size()) {
    throw std::invalid_argument("prediction count does not match the test set");
  }
  std::vector<std::vector<AsrCell>> cells(kNumTriggers, std::vector<AsrCell>(num_classes));
  for (std::size_t i = 0; i < test.size(); ++i) {
    const std::size_t y = test[i].label;
    for (std::size_t t = 0; t < kNumTriggers; ++t) {
      if (benign[i][t] != y) continue;
      for (std::size_t l = 0; l < num_classes; ++l) {
        if (l == y) continue;
        ++cells[t][l].poisoned;
        cells[t][l].misclassified += evaluated[i][t] == l ? 1 : 0;
      }
    }
  }
  return cells;
}

void summarize_cells(MetricsReport& report) {
  report.asr_t.assign(report.cells.size(), std::nullopt);
  double sum = 0.0;
  std::size_t defined = 0;
  report.masr = 0.0;
  for (std::size_t t = 0; t < report.cells.size(); ++t) {
    for (std::size_t l = 0; l < report.cells[t].size(); ++l) {
      const auto r = report.cells[t][l].rate();
      if (!r) {
        report.warnings.push_back("ASR cell (trigger " + std::to_string(t) + ", label " + std::to_string(l) +
                                  ") has no eligible samples; excluded");
        continue;
      }
      report.asr_t[t] = std::max(report.asr_t[t].value_or(0.0), *r);
    }
    if (report.asr_t[t]) {
      sum += *report.asr_t[t];
      ++defined;
      report.masr = std::max(report.masr, *report.asr_t[t]);
    }
  }
  report.aasr = defined ? sum / static_cast<double>(defined) : 0.0;
}

MetricsReport evaluate(const PredictionSet& evaluated, const PredictionSet& benign, std::span<const Example> test,
                       std::size_t num_classes) {
  MetricsReport r;
  r.cacc = cacc(evaluated.clean, test);
  r.asr_any = asr_any(benign.clean, evaluated.instances, test, &r.asr_any_denominator);
  r.cells = asr_cells(benign.instances, evaluated.instances, test, num_classes);
  summarize_cells(r);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  return r;
}

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& row : report.cells) {
    nlohmann::json jr = nlohmann::json::array();
    for (const auto& c : row) {
      nlohmann::json jc{{"misclassified", c.misclassified}, {"poisoned", c.poisoned}};
      jc["rate"] = c.rate() ? nlohmann::json(*c.rate()) : nlohmann::json(nullptr);
      jr.push_back(jc);
    }
    cells.push_back(jr);
  }
  nlohmann::json asr_t = nlohmann::json::array();
  for (const auto& a : report.asr_t) asr_t.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
  return {{"cacc", report.cacc},   {"asr_any", report.asr_any}, {"asr_any_denominator", report.asr_any_denominator},
          {"asr_cells", cells},    {"asr_t", asr_t},            {"masr", report.masr},
          {"aasr", report.aasr},   {"warnings", report.warnings}};
}

std::string csv_header() { return "attack,peft,defense,seed,cacc,asr_any,masr,aasr,lambda_amp,lambda_reg,status"; }

std::string csv_row(const ResultRow& row) {
  auto num = [](double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
  };
  std::ostringstream os;
  os << row.attack << ',' << row.peft << ',' << row.defense << ',' << row.seed << ',' << num(row.cacc) << ','
     << num(row.asr_any) << ',' << num(row.masr) << ',' << num(row.aasr) << ',' << num(row.lambda_amp) << ','
     << num(row.lambda_reg) << ',' << row.status;
  return os.str();
}

nlohmann::json to_json(const ResultRow& row) {
  return {{"attack", row.attack}, {"peft", row.peft},       {"defense", row.defense},       {"seed", row.seed},
          {"cacc", row.cacc},     {"asr_any", row.asr_any}, {"masr", row.masr},             {"aasr", row.aasr},
          {"lambda_amp", row.lambda_amp}, {"lambda_reg", row.lambda_reg}, {"status", row.status}};
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine of vectors with different dimensions");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

std::vector<double> layer_similarity(const EncoderParams& model, const PeftParams* peft,
                                     std::span<const Sequence> probes, std::span<const std::vector<double>> references) {
  if (probes.size() != references.size()) throw std::invalid_argument("one reference per probe is required");
  if (probes.empty()) throw std::invalid_argument("similarity needs at least one probe");
  NoGradGuard no_grad;
  const std::size_t d = model.config.hidden_dim;
  std::vector<double> out(model.config.num_layers, 0.0);
  for (std::size_t start = 0; start < probes.size(); start += 64) {
    const auto chunk = probes.subspan(start, std::min<std::size_t>(64, probes.size() - start));
    const auto trace = forward(model, Batch::pack(chunk, model.config.special.pad), peft);
    for (std::size_t l = 0; l < trace.layer_cls.size(); ++l) {
      for (std::size_t b = 0; b < chunk.size(); ++b) {
        const auto& ref = references[start + b];
        if (ref.size() != d) throw std::invalid_argument("reference dimension does not match the model");
        out[l] += cosine_similarity(trace.layer_cls[l].values().subspan(b * d, d), ref);
      }
    }
  }
  for (auto& v : out) v /= static_cast<double>(probes.size());
  return out;
}

std::vector<std::vector<double>> final_cls(const EncoderParams& model, const PeftParams* peft,
                                           std::span<const Sequence> probes) {
  NoGradGuard no_grad;
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start < probes.size(); start += 64) {
    const auto chunk = probes.subspan(start, std::min<std::size_t>(64, probes.size() - start));
    const auto trace = forward(model, Batch::pack(chunk, model.config.special.pad), peft);
    for (std::size_t b = 0; b < chunk.size(); ++b) out.push_back(cls_output(trace, b));
  }
  return out;
}

nlohmann::json to_json(const SimilarityProfile& profile) {
  return {{"benign", profile.benign}, {"backdoored", profile.backdoored}, {"defended", profile.defended}};
}

std::vector<AttentionProbe> make_attention_probes(std::span<const Example> source, const Vocab& vocab,
                                                  std::uint64_t seed, std::size_t max_seq_len) {
  Rng rng = Rng::derive(seed, 0xa77e);
  std::vector<AttentionProbe> out;
  for (const auto& ex : source) {
    const std::size_t t = rng.uniform_int(0, kNumTriggers - 1);
    auto poisoned = insert_trigger(ex, vocab, t, rng, max_seq_len);
    out.push_back({std::move(poisoned.tokens), poisoned.poison->position});
  }
  return out;
}

AttentionGap attention_gap(const EncoderParams& model, const PeftParams* peft, std::span<const AttentionProbe> probes) {
  if (probes.empty()) throw std::invalid_argument("attention gap needs at least one probe");
  NoGradGuard no_grad;
  const auto& sp = model.config.special;
  double trig = 0.0, normal = 0.0;
  std::size_t n_trig = 0, n_normal = 0;
  for (std::size_t start = 0; start < probes.size(); start += 64) {
    const std::size_t count = std::min<std::size_t>(64, probes.size() - start);
    std::vector<Sequence> seqs;
    for (std::size_t i = 0; i < count; ++i) seqs.push_back(probes[start + i].tokens);
    const auto trace = forward(model, Batch::pack(seqs, sp.pad), peft);
    for (std::size_t b = 0; b < count; ++b) {
      const auto& p = probes[start + b];
      for (std::size_t j = 0; j < p.tokens.size(); ++j) {
        const TokenId tok = p.tokens[j];
        if (tok == sp.cls || tok == sp.sep) continue;
        const double a = trace.cls_attention(b, j);
        if (j == p.trigger_position) {
          trig += a;
          ++n_trig;
        } else {
          normal += a;
          ++n_normal;
        }
      }
    }
  }
  return {n_trig ? trig / static_cast<double>(n_trig) : 0.0, n_normal ? normal / static_cast<double>(n_normal) : 0.0};
}

nlohmann::json to_json(const DynamicsLog& log) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : log.entries) {
    nlohmann::json j{{"epoch", e.epoch},
                     {"peft_norm", e.peft_norm},
                     {"encoder_norm", e.encoder_norm},
                     {"trigger_attention", e.trigger_attention},
                     {"normal_attention", e.normal_attention}};
    j["cacc"] = e.cacc ? nlohmann::json(*e.cacc) : nlohmann::json(nullptr);
    j["asr"] = e.asr ? nlohmann::json(*e.asr) : nlohmann::json(nullptr);
    arr.push_back(j);
  }
  return arr;
}

EpochHook track_dynamics(DynamicsLog& log, DynamicsProbe probe) {
  return [&log, probe](std::size_t epoch, const TunedModel& model) {
    if (!log.entries.empty() && epoch <= log.entries.back().epoch) {
      throw std::logic_error("dynamics epochs must increase");
    }
    DynamicsEntry e;
    e.epoch = epoch;
    for (const auto& m : collect_weight_matrices(model.peft)) {
      double s = 0.0;
      for (double v : m.weight.values()) s += v * v;
      e.peft_norm += std::sqrt(s);
    }
    for (const auto& w : model.model.encoder_matrices()) {
      double s = 0.0;
      for (double v : w.values()) s += v * v;
      e.encoder_norm += std::sqrt(s);
    }
    if (!probe.attention.empty()) {
      const auto gap = attention_gap(model.model, &model.peft, probe.attention);
      e.trigger_attention = gap.trigger;
      e.normal_attention = gap.normal;
    }
    if (!probe.test.empty() && probe.asr && probe.benign) {
      const Predictor pred = [&model](std::span<const Sequence> s) { return model.predict(s); };
      const auto preds = predict_all(pred, probe.test, *probe.asr);
      e.cacc = cacc(preds.clean, probe.test);
      e.asr = asr_any(probe.benign->clean, preds.instances, probe.test);
    }
    log.entries.push_back(e);
  };
}

std::vector<ThresholdPoint> attention_threshold_baseline(const TunedModel& model, const PredictionSet& benign,
                                                         std::span<const Example> test, const AsrInstances& asr,
                                                         std::span<const double> thresholds) {
  std::vector<ThresholdPoint> out;
  for (double th : thresholds) {
    std::size_t removed_total = 0, inputs = 0;
    const Predictor filtered = [&](std::span<const Sequence> seqs) {
      std::vector<Sequence> kept;
      kept.reserve(seqs.size());
      for (const auto& s : seqs) {
        std::size_t removed = 0;
        kept.push_back(filter_by_attention(model, s, th, &removed));
        removed_total += removed;
        ++inputs;
      }
      return model.predict(kept);
    };
    const auto preds = predict_all(filtered, test, asr);
    out.push_back({th, cacc(preds.clean, test), asr_any(benign.clean, preds.instances, test),
                   static_cast<double>(removed_total) / static_cast<double>(inputs)});
  }
  return out;
}

}  // namespace bdw
