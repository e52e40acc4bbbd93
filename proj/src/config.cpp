#include "bdw/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace bdw {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& text, const std::string& where) {
  const std::string s = trim(text);
  T value{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError(where + ": cannot parse '" + s + "'");
  }
  return value;
}

bool parse_bool(const std::string& text, const std::string& where) {
  const std::string s = trim(text);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(where + ": expected a boolean, got '" + s + "'");
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& where) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(parse_number<T>(item, where));
  }
  return out;
}

template <typename T>
std::string format_list(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ", ";
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(values[i]);
    } else {
      out += std::to_string(values[i]);
    }
  }
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::string doc;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename T, typename Access>
Field field(std::string section, std::string key, std::string doc, Access access) {
  Field f{section, key, std::move(doc), {}, {}};
  const std::string where = section + "." + key;
  f.get = [access](const ExperimentConfig& c) -> std::string {
    const T& v = access(const_cast<ExperimentConfig&>(c));
    if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_floating_point_v<T>) {
      return format_double(v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
      return v.string();
    } else if constexpr (std::is_same_v<T, std::vector<double>> || std::is_same_v<T, std::vector<std::uint64_t>>) {
      return format_list(v);
    } else {
      return std::to_string(v);
    }
  };
  f.set = [access, where](ExperimentConfig& c, const std::string& text) {
    T& v = access(c);
    if constexpr (std::is_same_v<T, bool>) {
      v = parse_bool(text, where);
    } else if constexpr (std::is_same_v<T, std::string>) {
      v = trim(text);
    } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
      v = trim(text);
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      v = parse_list<double>(text, where);
    } else if constexpr (std::is_same_v<T, std::vector<std::uint64_t>>) {
      v = parse_list<std::uint64_t>(text, where);
    } else {
      v = parse_number<T>(text, where);
    }
  };
  return f;
}

#define BDW_FIELD(T, section, key, doc, expr) \
  field<T>(section, key, doc, [](ExperimentConfig & c) -> T& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> t;
    t.push_back(BDW_FIELD(std::uint64_t, "experiment", "seed", "fine-tuning seed; pretrain and attack seeds derive from it", c.seed));
    t.push_back(BDW_FIELD(std::filesystem::path, "experiment", "output_dir", "", c.output_dir));

    t.push_back(BDW_FIELD(std::size_t, "model", "num_layers", "", c.model.num_layers));
    t.push_back(BDW_FIELD(std::size_t, "model", "num_heads", "", c.model.num_heads));
    t.push_back(BDW_FIELD(std::size_t, "model", "hidden_dim", "", c.model.hidden_dim));
    t.push_back(BDW_FIELD(std::size_t, "model", "ffn_dim", "", c.model.ffn_dim));
    t.push_back(BDW_FIELD(std::size_t, "model", "vocab_size", "", c.model.vocab_size));
    t.push_back(BDW_FIELD(std::size_t, "model", "max_seq_len", "", c.model.max_seq_len));

    t.push_back(BDW_FIELD(std::uint64_t, "corpus", "language_seed", "fixes the successor map", c.corpus.language_seed));
    t.push_back(BDW_FIELD(double, "corpus", "zipf_exponent", "", c.corpus.zipf_exponent));
    t.push_back(BDW_FIELD(double, "corpus", "successor_prob", "", c.corpus.successor_prob));
    t.push_back(BDW_FIELD(std::size_t, "corpus", "min_words", "", c.corpus.min_words));
    t.push_back(BDW_FIELD(std::size_t, "corpus", "max_words", "", c.corpus.max_words));

    t.push_back(BDW_FIELD(std::size_t, "pretrain", "corpus_size", "", c.pretrain.corpus_size));
    t.push_back(BDW_FIELD(std::size_t, "pretrain", "heldout_size", "", c.pretrain.heldout_size));
    t.push_back(BDW_FIELD(std::size_t, "pretrain", "epochs", "", c.pretrain.schedule.epochs));
    t.push_back(BDW_FIELD(std::size_t, "pretrain", "batch_size", "", c.pretrain.schedule.batch_size));
    t.push_back(BDW_FIELD(double, "pretrain", "learning_rate", "", c.pretrain.schedule.learning_rate));
    t.push_back(BDW_FIELD(double, "pretrain", "summary_weight", "[CLS] bag-of-words term", c.pretrain.objective.summary_weight));

    t.push_back(BDW_FIELD(std::uint64_t, "task", "seed", "", c.task.seed));
    t.push_back(BDW_FIELD(std::size_t, "task", "num_classes", "", c.task.config.num_classes));
    t.push_back(BDW_FIELD(std::size_t, "task", "train_size", "", c.task.config.train_size));
    t.push_back(BDW_FIELD(std::size_t, "task", "validation_size", "", c.task.config.validation_size));
    t.push_back(BDW_FIELD(std::size_t, "task", "test_size", "", c.task.config.test_size));
    t.push_back(BDW_FIELD(std::size_t, "task", "keywords_per_class", "", c.task.config.keywords_per_class));
    t.push_back(BDW_FIELD(std::size_t, "task", "keywords_per_sample", "", c.task.config.keywords_per_sample));
    t.push_back(BDW_FIELD(std::size_t, "task", "min_background", "", c.task.config.min_background));
    t.push_back(BDW_FIELD(std::size_t, "task", "max_background", "", c.task.config.max_background));

    Field kind{"attack", "kind", "none, por, neuba, badpre, uor, adaptive_por or word_trigger", {}, {}};
    kind.get = [](const ExperimentConfig& c) { return c.attack.kind ? to_string(*c.attack.kind) : std::string("none"); };
    kind.set = [](ExperimentConfig& c, const std::string& text) {
      const std::string s = trim(text);
      if (s == "none") {
        c.attack.kind.reset();
        return;
      }
      try {
        c.attack.kind = parse_attack_kind(s);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("attack.kind: ") + e.what());
      }
    };
    t.push_back(kind);
    t.push_back(BDW_FIELD(std::size_t, "attack", "epochs", "", c.attack.config.epochs));
    t.push_back(BDW_FIELD(std::size_t, "attack", "batch_size", "", c.attack.config.batch_size));
    t.push_back(BDW_FIELD(double, "attack", "learning_rate", "", c.attack.config.learning_rate));
    t.push_back(BDW_FIELD(double, "attack", "poison_fraction", "", c.attack.config.poison_fraction));
    t.push_back(BDW_FIELD(double, "attack", "clean_weight", "", c.attack.config.clean_weight));
    t.push_back(BDW_FIELD(double, "attack", "target_norm", "0 = clean mean [CLS] norm", c.attack.config.target_norm));
    t.push_back(BDW_FIELD(double, "attack", "uor_margin", "", c.attack.config.uor_margin));
    t.push_back(BDW_FIELD(double, "attack", "uor_push_weight", "", c.attack.config.uor_push_weight));
    t.push_back(BDW_FIELD(double, "attack", "amplification_weight", "adaptive_por", c.attack.config.amplification_weight));
    t.push_back(BDW_FIELD(double, "attack", "attention_reg_weight", "adaptive_por", c.attack.config.attention_reg_weight));
    t.push_back(BDW_FIELD(std::size_t, "attack", "corpus_size", "", c.attack.config.corpus_size));
    t.push_back(BDW_FIELD(std::size_t, "attack", "heldout_size", "", c.attack.heldout_size));
    t.push_back(BDW_FIELD(std::size_t, "attack", "trigger_index", "word_trigger", c.attack.trigger_index));
    t.push_back(BDW_FIELD(std::size_t, "attack", "target_label", "word_trigger", c.attack.target_label));
    t.push_back(BDW_FIELD(double, "attack", "poison_rate", "word_trigger", c.attack.poison_rate));

    Field peft{"peft", "kind", "adapter, lora or prefix", {}, {}};
    peft.get = [](const ExperimentConfig& c) { return to_string(c.finetune.peft.kind); };
    peft.set = [](ExperimentConfig& c, const std::string& text) {
      try {
        c.finetune.peft.kind = parse_peft_kind(trim(text));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("peft.kind: ") + e.what());
      }
    };
    t.push_back(peft);
    t.push_back(BDW_FIELD(std::size_t, "peft", "reduction_factor", "", c.finetune.peft.reduction_factor));
    t.push_back(BDW_FIELD(std::size_t, "peft", "rank", "", c.finetune.peft.rank));
    t.push_back(BDW_FIELD(double, "peft", "alpha", "", c.finetune.peft.alpha));
    t.push_back(BDW_FIELD(std::size_t, "peft", "prefix_length", "", c.finetune.peft.prefix_length));
    t.push_back(BDW_FIELD(std::size_t, "peft", "bottleneck", "", c.finetune.peft.bottleneck));

    t.push_back(BDW_FIELD(std::size_t, "finetune", "epochs", "0 = per-PEFT default", c.finetune.epochs));
    t.push_back(BDW_FIELD(std::size_t, "finetune", "batch_size", "", c.finetune.batch_size));
    t.push_back(BDW_FIELD(double, "finetune", "learning_rate", "0 = per-PEFT default", c.finetune.learning_rate));

    t.push_back(BDW_FIELD(bool, "defense", "enabled", "", c.defense.enabled));
    t.push_back(BDW_FIELD(bool, "defense", "select", "grid selection instead of the fixed lambdas", c.defense.select));
    t.push_back(BDW_FIELD(double, "defense", "lambda_amp", "", c.defense.config.lambda_amp));
    t.push_back(BDW_FIELD(double, "defense", "lambda_reg", "", c.defense.config.lambda_reg));
    t.push_back(BDW_FIELD(bool, "defense", "amp_enabled", "", c.defense.config.amp_enabled));
    t.push_back(BDW_FIELD(bool, "defense", "reg_enabled", "", c.defense.config.reg_enabled));
    t.push_back(BDW_FIELD(double, "defense", "epsilon", "", c.defense.config.epsilon));
    t.push_back(BDW_FIELD(std::vector<double>, "defense", "amp_grid", "", c.defense.grid.amp));
    t.push_back(BDW_FIELD(std::vector<double>, "defense", "reg_grid", "", c.defense.grid.reg));
    t.push_back(BDW_FIELD(double, "defense", "max_drop", "relative validation CACC drop", c.defense.grid.max_drop));

    t.push_back(BDW_FIELD(std::vector<std::uint64_t>, "sweep", "seeds", "", c.sweep.seeds));
    t.push_back(BDW_FIELD(std::vector<double>, "sweep", "amp_values", "lambda_reg = 0 for these points", c.sweep.amp_values));
    t.push_back(BDW_FIELD(std::vector<double>, "sweep", "reg_values", "lambda_amp = 0 for these points", c.sweep.reg_values));

    t.push_back(BDW_FIELD(std::size_t, "analysis", "probes", "", c.analysis.probes));
    t.push_back(BDW_FIELD(std::vector<double>, "analysis", "thresholds", "attention filter multiples of the mean", c.analysis.thresholds));
    t.push_back(BDW_FIELD(std::string, "analysis", "sentence", "empty = first test example", c.analysis.sentence));
    return t;
  }();
  return table;
}

#undef BDW_FIELD

}  // namespace

TrainSchedule default_finetune_schedule(PeftKind kind) {
  switch (kind) {
    case PeftKind::adapter:
      return {20, 16, 7e-3};
    case PeftKind::lora:
      return {30, 16, 5e-3};
    case PeftKind::prefix:
      return {20, 16, 2e-2};
  }
  return {20, 16, 7e-3};
}

TrainSchedule FinetuneSettings::schedule() const {
  auto s = default_finetune_schedule(peft.kind);
  if (epochs) s.epochs = epochs;
  s.batch_size = batch_size;
  if (learning_rate > 0.0) s.learning_rate = learning_rate;
  return s;
}

void ExperimentConfig::validate() const {
  auto guard = [](const char* what, auto&& fn) {
    try {
      fn();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(what) + ": " + e.what());
    }
  };
  guard("model", [&] { model.validate(); });
  guard("peft", [&] { finetune.peft.validate(model); });
  guard("attack", [&] { attack.config.validate(); });
  guard("defense", [&] { defense.config.validate(); });
  guard("defense", [&] { defense.grid.validate(); });
  if (output_dir.empty()) throw ConfigError("experiment.output_dir must not be empty");
  if (corpus.min_words == 0 || corpus.min_words > corpus.max_words) {
    throw ConfigError("corpus: need 0 < min_words <= max_words");
  }
  if (corpus.max_words + 2 > model.max_seq_len) throw ConfigError("corpus.max_words does not fit max_seq_len");
  if (!(corpus.successor_prob >= 0.0 && corpus.successor_prob <= 1.0)) {
    throw ConfigError("corpus.successor_prob must lie in [0, 1]");
  }
  if (!(corpus.zipf_exponent >= 0.0)) throw ConfigError("corpus.zipf_exponent must be >= 0");
  if (pretrain.corpus_size == 0 || pretrain.heldout_size == 0) throw ConfigError("pretrain sizes must be positive");
  if (pretrain.schedule.epochs == 0 || pretrain.schedule.batch_size == 0 || !(pretrain.schedule.learning_rate > 0.0)) {
    throw ConfigError("pretrain schedule must be positive");
  }
  if (!(pretrain.objective.summary_weight >= 0.0)) throw ConfigError("pretrain.summary_weight must be >= 0");
  const auto& tc = task.config;
  if (tc.num_classes < 2) throw ConfigError("task.num_classes must be >= 2");
  if (tc.train_size == 0 || tc.validation_size == 0 || tc.test_size == 0) throw ConfigError("task sizes must be positive");
  if (tc.keywords_per_class == 0 || tc.keywords_per_sample == 0) throw ConfigError("task keyword counts must be positive");
  if (tc.min_background > tc.max_background) throw ConfigError("task: min_background > max_background");
  if (tc.keywords_per_sample + tc.max_background + 3 > model.max_seq_len) {
    throw ConfigError("task samples plus a trigger do not fit max_seq_len");
  }
  if (attack.heldout_size == 0) throw ConfigError("attack.heldout_size must be positive");
  if (attack.trigger_index >= kNumTriggers) throw ConfigError("attack.trigger_index out of range");
  if (attack.target_label >= tc.num_classes) throw ConfigError("attack.target_label out of range");
  if (!(attack.poison_rate >= 0.0 && attack.poison_rate <= 0.5)) throw ConfigError("attack.poison_rate must lie in [0, 0.5]");
  if (finetune.batch_size == 0) throw ConfigError("finetune.batch_size must be positive");
  if (!(finetune.learning_rate >= 0.0)) throw ConfigError("finetune.learning_rate must be >= 0");
  if (sweep.seeds.empty()) throw ConfigError("sweep.seeds must not be empty");
  for (double v : sweep.amp_values) {
    if (!(v >= 0.0)) throw ConfigError("sweep.amp_values must be >= 0");
  }
  for (double v : sweep.reg_values) {
    if (!(v >= 0.0)) throw ConfigError("sweep.reg_values must be >= 0");
  }
  if (analysis.probes == 0) throw ConfigError("analysis.probes must be positive");
  for (double v : analysis.thresholds) {
    if (!(v > 0.0)) throw ConfigError("analysis.thresholds must be positive");
  }
}

ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  ExperimentConfig config;
  std::set<std::string> seen;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' outside any section");
    for (const auto& [key, value] : body) {
      const Field* match = nullptr;
      for (const auto& f : fields()) {
        if (f.section == section && f.key == key) match = &f;
      }
      if (!match) throw ConfigError("unknown key '" + section + "." + key + "'");
      match->set(config, value.data());
    }
  }
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string render_config(const ExperimentConfig& config) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out << "\n";
      section = f.section;
      out << "[" << section << "]\n";
    }
    if (!f.doc.empty()) out << "; " << f.doc << "\n";
    out << f.key << " = " << f.get(config) << "\n";
  }
  return out.str();
}

}  // namespace bdw
