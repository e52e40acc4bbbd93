#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "bdw/model.hpp"
#include "bdw/random.hpp"

namespace bdw {

inline constexpr std::size_t kNumTriggers = 6;
inline constexpr std::array<const char*, kNumTriggers> kTriggerTokens = {"cf", "mn", "tq", "qt", "mm", "pt"};

/// Token table: five specials, the six trigger tokens, then ordinary words.
class Vocab {
 public:
  /// Builds the synthetic vocabulary of `size` entries.
  static Vocab synthetic(std::size_t size);
  /// Newline-delimited token list; line number is the id.
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  /// Falls back to [UNK] for unknown strings.
  TokenId id(const std::string& token) const;
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }

  const SpecialTokens& special() const { return special_; }
  const std::array<TokenId, kNumTriggers>& triggers() const { return triggers_; }
  bool is_trigger(TokenId id) const;
  /// First id of the ordinary-word range.
  TokenId first_word() const { return first_word_; }
  std::size_t word_count() const { return tokens_.size() - first_word_; }

  std::vector<TokenId> encode(const std::string& text) const;
  std::string decode(std::span<const TokenId> ids) const;

 private:
  void index();
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  SpecialTokens special_;
  std::array<TokenId, kNumTriggers> triggers_{};
  TokenId first_word_ = 0;
};

struct PoisonMarker {
  std::size_t trigger_index;
  std::size_t position;
};

struct Example {
  Sequence tokens;  // includes [CLS] ... [SEP]
  std::size_t label = 0;
  std::optional<PoisonMarker> poison;
};

struct DatasetBundle {
  std::string task;
  std::size_t num_classes = 0;
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;
};

/// Sequence generator over ordinary words: a Zipf unigram law mixed with a
/// fixed successor map, so neighbours carry information about masked tokens.
struct CorpusConfig {
  /// Fixes the successor map (the "language"); sample seeds vary independently.
  std::uint64_t language_seed = 0;
  double zipf_exponent = 1.0;
  double successor_prob = 0.5;
  std::size_t min_words = 8;
  std::size_t max_words = 20;
};

class SequenceSampler {
 public:
  SequenceSampler(const Vocab& vocab, const CorpusConfig& config);

  /// Probability of each ordinary word under the unigram law (index = id - first_word).
  const std::vector<double>& unigram() const { return unigram_; }
  TokenId successor(TokenId word) const { return successor_.at(word - first_word_); }

  TokenId draw_unigram(Rng& rng) const;
  /// Ordinary words only; `excluded` words are resampled.
  std::vector<TokenId> draw_words(Rng& rng, std::size_t count, std::span<const TokenId> excluded = {}) const;

 private:
  CorpusConfig config_;
  TokenId first_word_;
  std::vector<double> unigram_;
  std::vector<double> cumulative_;
  std::vector<TokenId> successor_;
};

/// `size` sequences of the form [CLS] w1 ... wn [SEP].
std::vector<Sequence> build_pretrain_corpus(const Vocab& vocab, std::uint64_t seed, std::size_t size,
                                            const CorpusConfig& config = {});

struct TaskConfig {
  std::size_t num_classes = 4;
  std::size_t train_size = 2000;
  std::size_t validation_size = 500;
  std::size_t test_size = 500;
  std::size_t keywords_per_class = 5;
  std::size_t keywords_per_sample = 2;
  std::size_t min_background = 6;
  std::size_t max_background = 12;
};

/// Keyword sets drawn for each class; pairwise disjoint.
std::vector<std::vector<TokenId>> task_keywords(const Vocab& vocab, std::uint64_t seed, const TaskConfig& config);

DatasetBundle build_task(const Vocab& vocab, std::uint64_t seed, const TaskConfig& config,
                         const CorpusConfig& corpus = {});

/// Inserts one trigger at a uniformly random interior position (after [CLS],
/// at or before [SEP]). Throws std::length_error when the sequence is full.
Example insert_trigger(const Example& example, const Vocab& vocab, std::size_t trigger_index, Rng& rng,
                       std::size_t max_seq_len);
Example insert_trigger_at(const Example& example, const Vocab& vocab, std::size_t trigger_index,
                          std::size_t position, std::size_t max_seq_len);

/// One instance per trigger, all keeping the source label.
std::vector<Example> make_asr_instances(const Example& example, const Vocab& vocab, Rng& rng, std::size_t max_seq_len);

struct MaskedSequence {
  Sequence tokens;
  std::vector<std::size_t> positions;
  std::vector<TokenId> targets;
};

/// Masks round(rate * n) of the n ordinary-word positions with [MASK].
MaskedSequence mask_for_mlm(const Sequence& sequence, const Vocab& vocab, Rng& rng, double rate = 0.15);
Sequence unmask(const MaskedSequence& masked);

/// Rows of "label<TAB>text"; text is whitespace-tokenized, [CLS]/[SEP] added.
std::vector<Example> load_tsv(const std::filesystem::path& path, const Vocab& vocab, std::size_t num_classes,
                              std::size_t max_seq_len);
/// Reads train.tsv, validation.tsv and test.tsv from `dir`.
DatasetBundle load_tsv_bundle(const std::filesystem::path& dir, const Vocab& vocab, std::size_t num_classes,
                              std::size_t max_seq_len);
void save_tsv(const std::filesystem::path& path, std::span<const Example> examples, const Vocab& vocab);

}  // namespace bdw
