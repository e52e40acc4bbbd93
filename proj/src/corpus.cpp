#include "bdw/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bdw {

namespace {

constexpr std::uint64_t kTagSuccessor = 0x5ccc;
constexpr std::uint64_t kTagKeywords = 0x6e7;
constexpr std::uint64_t kTagSplit = 0x5b17;

Sequence wrap(const SpecialTokens& sp, std::span<const TokenId> words) {
  Sequence s;
  s.reserve(words.size() + 2);
  s.push_back(sp.cls);
  s.insert(s.end(), words.begin(), words.end());
  s.push_back(sp.sep);
  return s;
}

}  // namespace

Vocab Vocab::synthetic(std::size_t size) {
  const std::size_t reserved = 5 + kNumTriggers;
  if (size <= reserved) throw std::invalid_argument("vocabulary too small for specials and triggers");
  Vocab v;
  v.tokens_ = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  for (const char* t : kTriggerTokens) v.tokens_.emplace_back(t);
  const std::size_t words = size - reserved;
  for (std::size_t i = 0; i < words; ++i) {
    std::ostringstream os;
    os << 'w' << i;
    v.tokens_.push_back(os.str());
  }
  v.index();
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary file " + path.string());
  Vocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    v.tokens_.push_back(line);
  }
  v.index();
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

void Vocab::index() {
  ids_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary entry '" + tokens_[i] + "'");
    }
  }
  auto need = [this](const std::string& t) {
    auto it = ids_.find(t);
    if (it == ids_.end()) throw std::invalid_argument("vocabulary lacks required token '" + t + "'");
    return it->second;
  };
  special_ = SpecialTokens{need("[PAD]"), need("[UNK]"), need("[CLS]"), need("[SEP]"), need("[MASK]")};
  TokenId last_reserved = std::max({special_.pad, special_.unk, special_.cls, special_.sep, special_.mask});
  for (std::size_t i = 0; i < kNumTriggers; ++i) {
    triggers_[i] = need(kTriggerTokens[i]);
    last_reserved = std::max(last_reserved, triggers_[i]);
  }
  first_word_ = last_reserved + 1;
  if (first_word_ >= tokens_.size()) throw std::invalid_argument("vocabulary has no ordinary words");
}

TokenId Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? special_.unk : it->second;
}

bool Vocab::is_trigger(TokenId id) const { return std::find(triggers_.begin(), triggers_.end(), id) != triggers_.end(); }

std::vector<TokenId> Vocab::encode(const std::string& text) const {
  std::istringstream is(text);
  std::vector<TokenId> out;
  std::string w;
  while (is >> w) out.push_back(id(w));
  return out;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (auto id : ids) {
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

SequenceSampler::SequenceSampler(const Vocab& vocab, const CorpusConfig& config)
    : config_(config), first_word_(vocab.first_word()) {
  if (config.min_words == 0 || config.min_words > config.max_words) {
    throw std::invalid_argument("invalid corpus length range");
  }
  const std::size_t n = vocab.word_count();
  unigram_.resize(n);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    unigram_[r] = 1.0 / std::pow(static_cast<double>(r + 1), config.zipf_exponent);
    total += unigram_[r];
  }
  cumulative_.resize(n);
  double acc = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    unigram_[r] /= total;
    acc += unigram_[r];
    cumulative_[r] = acc;
  }
  cumulative_.back() = 1.0;
  auto rng = Rng::derive(config.language_seed, kTagSuccessor);
  successor_.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t s = rng.uniform_int(0, n - 2);
    if (s >= r) ++s;
    successor_[r] = static_cast<TokenId>(first_word_ + s);
  }
}

TokenId SequenceSampler::draw_unigram(Rng& rng) const {
  const double u = rng.uniform();
  const auto it = std::lower_bound(cumulative_.begin(), cumulative_.end(), u);
  return static_cast<TokenId>(first_word_ + static_cast<std::size_t>(it - cumulative_.begin()));
}

std::vector<TokenId> SequenceSampler::draw_words(Rng& rng, std::size_t count, std::span<const TokenId> excluded) const {
  auto banned = [&](TokenId w) { return std::find(excluded.begin(), excluded.end(), w) != excluded.end(); };
  std::vector<TokenId> out;
  out.reserve(count);
  while (out.size() < count) {
    TokenId w;
    if (!out.empty() && rng.uniform() < config_.successor_prob) {
      w = successor(out.back());
      if (banned(w)) continue;
    } else {
      do {
        w = draw_unigram(rng);
      } while (banned(w));
    }
    out.push_back(w);
  }
  return out;
}

std::vector<Sequence> build_pretrain_corpus(const Vocab& vocab, std::uint64_t seed, std::size_t size,
                                            const CorpusConfig& config) {
  if (size == 0) throw std::invalid_argument("corpus size must be at least 1");
  SequenceSampler sampler(vocab, config);
  Rng rng = Rng::derive(seed, 0xc0de);
  std::vector<Sequence> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t n = rng.uniform_int(config.min_words, config.max_words);
    out.push_back(wrap(vocab.special(), sampler.draw_words(rng, n)));
  }
  return out;
}

std::vector<std::vector<TokenId>> task_keywords(const Vocab& vocab, std::uint64_t seed, const TaskConfig& config) {
  if (config.num_classes != 2 && config.num_classes != 4) throw std::invalid_argument("num_classes must be 2 or 4");
  const std::size_t needed = config.num_classes * config.keywords_per_class;
  // keywords come from mid-frequency ranks so they are frequent enough in pretraining
  const std::size_t lo = 5;
  const std::size_t hi = std::min(vocab.word_count(), lo + 3 * needed);
  if (hi - lo < needed) throw std::invalid_argument("vocabulary too small for the keyword sets");
  std::vector<TokenId> pool;
  for (std::size_t r = lo; r < hi; ++r) pool.push_back(static_cast<TokenId>(vocab.first_word() + r));
  auto rng = Rng::derive(seed, kTagKeywords);
  rng.shuffle(pool);
  std::vector<std::vector<TokenId>> out(config.num_classes);
  for (std::size_t c = 0; c < config.num_classes; ++c) {
    out[c].assign(pool.begin() + static_cast<std::ptrdiff_t>(c * config.keywords_per_class),
                  pool.begin() + static_cast<std::ptrdiff_t>((c + 1) * config.keywords_per_class));
  }
  return out;
}

DatasetBundle build_task(const Vocab& vocab, std::uint64_t seed, const TaskConfig& config,
                         const CorpusConfig& corpus) {
  if (config.train_size == 0 || config.validation_size == 0 || config.test_size == 0) {
    throw std::invalid_argument("every task split must be non-empty");
  }
  if (config.keywords_per_sample == 0 || config.min_background > config.max_background) {
    throw std::invalid_argument("invalid task sample shape");
  }
  const auto keywords = task_keywords(vocab, seed, config);
  std::vector<TokenId> all_keywords;
  for (const auto& k : keywords) all_keywords.insert(all_keywords.end(), k.begin(), k.end());
  SequenceSampler sampler(vocab, corpus);

  auto make_split = [&](std::size_t n, std::uint64_t tag) {
    auto rng = Rng::derive(seed, kTagSplit + tag);
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % config.num_classes;
    rng.shuffle(labels);
    std::vector<Example> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t bg = rng.uniform_int(config.min_background, config.max_background);
      auto words = sampler.draw_words(rng, bg, all_keywords);
      const auto& kw = keywords[labels[i]];
      for (std::size_t j = 0; j < config.keywords_per_sample; ++j) {
        const TokenId w = kw[rng.uniform_int(0, kw.size() - 1)];
        const std::size_t pos = rng.uniform_int(0, words.size());
        words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), w);
      }
      out.push_back(Example{wrap(vocab.special(), words), labels[i], std::nullopt});
    }
    return out;
  };

  DatasetBundle bundle;
  bundle.task = "synthetic-keywords-" + std::to_string(config.num_classes);
  bundle.num_classes = config.num_classes;
  bundle.train = make_split(config.train_size, 1);
  bundle.validation = make_split(config.validation_size, 2);
  bundle.test = make_split(config.test_size, 3);
  return bundle;
}

Example insert_trigger_at(const Example& example, const Vocab& vocab, std::size_t trigger_index,
                          std::size_t position, std::size_t max_seq_len) {
  if (trigger_index >= kNumTriggers) throw std::out_of_range("trigger index out of range");
  if (example.tokens.size() + 1 > max_seq_len) throw std::length_error("sequence full; cannot insert trigger");
  if (example.tokens.size() < 2 || position < 1 || position > example.tokens.size() - 1) {
    throw std::out_of_range("trigger position must be interior");
  }
  Example out = example;
  out.tokens.insert(out.tokens.begin() + static_cast<std::ptrdiff_t>(position), vocab.triggers()[trigger_index]);
  out.poison = PoisonMarker{trigger_index, position};
  return out;
}

Example insert_trigger(const Example& example, const Vocab& vocab, std::size_t trigger_index, Rng& rng,
                       std::size_t max_seq_len) {
  if (example.tokens.size() + 1 > max_seq_len) throw std::length_error("sequence full; cannot insert trigger");
  if (example.tokens.size() < 2) throw std::out_of_range("sequence has no interior");
  const std::size_t pos = rng.uniform_int(1, example.tokens.size() - 1);
  return insert_trigger_at(example, vocab, trigger_index, pos, max_seq_len);
}

std::vector<Example> make_asr_instances(const Example& example, const Vocab& vocab, Rng& rng,
                                        std::size_t max_seq_len) {
  std::vector<Example> out;
  out.reserve(kNumTriggers);
  for (std::size_t t = 0; t < kNumTriggers; ++t) out.push_back(insert_trigger(example, vocab, t, rng, max_seq_len));
  return out;
}

MaskedSequence mask_for_mlm(const Sequence& sequence, const Vocab& vocab, Rng& rng, double rate) {
  if (sequence.empty()) throw std::invalid_argument("cannot mask an empty sequence");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < sequence.size(); ++i) {
    if (!vocab.special().is_special(sequence[i]) && !vocab.is_trigger(sequence[i])) eligible.push_back(i);
  }
  const auto k = static_cast<std::size_t>(std::lround(rate * static_cast<double>(eligible.size())));
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = rng.uniform_int(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[j]);
  }
  eligible.resize(k);
  std::sort(eligible.begin(), eligible.end());
  MaskedSequence out{sequence, eligible, {}};
  for (auto p : eligible) {
    out.targets.push_back(sequence[p]);
    out.tokens[p] = vocab.special().mask;
  }
  return out;
}

Sequence unmask(const MaskedSequence& masked) {
  Sequence out = masked.tokens;
  for (std::size_t i = 0; i < masked.positions.size(); ++i) out[masked.positions[i]] = masked.targets[i];
  return out;
}

std::vector<Example> load_tsv(const std::filesystem::path& path, const Vocab& vocab, std::size_t num_classes,
                              std::size_t max_seq_len) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file " + path.string());
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) fail("malformed row (expected label<TAB>text)");
    const std::string label_str = line.substr(0, tab);
    std::size_t consumed = 0;
    unsigned long label = 0;
    try {
      label = std::stoul(label_str, &consumed);
    } catch (const std::exception&) {
      fail("malformed label '" + label_str + "'");
    }
    if (consumed != label_str.size() || label_str.empty()) fail("malformed label '" + label_str + "'");
    if (label >= num_classes) fail("unknown label " + label_str);
    auto words = vocab.encode(line.substr(tab + 1));
    if (words.empty()) fail("empty text");
    // leave room for [CLS], [SEP] and one inserted trigger
    if (words.size() + 3 > max_seq_len) words.resize(max_seq_len - 3);
    out.push_back(Example{wrap(vocab.special(), words), static_cast<std::size_t>(label), std::nullopt});
  }
  return out;
}

DatasetBundle load_tsv_bundle(const std::filesystem::path& dir, const Vocab& vocab, std::size_t num_classes,
                              std::size_t max_seq_len) {
  DatasetBundle b;
  b.task = dir.filename().string();
  b.num_classes = num_classes;
  b.train = load_tsv(dir / "train.tsv", vocab, num_classes, max_seq_len);
  b.validation = load_tsv(dir / "validation.tsv", vocab, num_classes, max_seq_len);
  b.test = load_tsv(dir / "test.tsv", vocab, num_classes, max_seq_len);
  if (b.train.empty() || b.validation.empty() || b.test.empty()) {
    throw std::runtime_error("dataset splits must be non-empty in " + dir.string());
  }
  return b;
}

void save_tsv(const std::filesystem::path& path, std::span<const Example> examples, const Vocab& vocab) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset file " + path.string());
  for (const auto& e : examples) {
    std::span<const TokenId> body(e.tokens);
    if (body.size() >= 2) body = body.subspan(1, body.size() - 2);
    out << e.label << '\t' << vocab.decode(body) << '\n';
  }
}

}  // namespace bdw
