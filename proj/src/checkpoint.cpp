#include "bdw/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace bdw {

namespace {

constexpr char kMagic[8] = {'B', 'D', 'W', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError("truncated checkpoint header");
  return v;
}

void copy_into(const Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw CheckpointError("tensor '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                          shape_str(dst.shape()));
  }
  std::copy(src.values().begin(), src.values().end(), dst.mutable_values().begin());
}

const Tensor& require(const Checkpoint& ckpt, const std::string& name) {
  const Tensor* t = ckpt.find(name);
  if (!t) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
  return *t;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  nlohmann::json meta = ckpt.metadata;
  meta["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors) meta["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
  const std::string text = meta.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_raw<std::uint32_t>(out, kCheckpointVersion);
  write_raw<std::uint8_t>(out, 1);
  write_raw<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    out.write(reinterpret_cast<const char*>(t.values().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  const auto version = read_raw<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  if (read_raw<std::uint8_t>(in) != 1) throw CheckpointError("checkpoint is not little-endian");
  const auto len = read_raw<std::uint64_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("truncated checkpoint metadata");
  Checkpoint ckpt;
  ckpt.metadata = nlohmann::json::parse(text);
  for (const auto& entry : ckpt.metadata.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> values(shape_numel(shape));
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw CheckpointError("truncated tensor data in " + path.string());
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), Tensor::from(std::move(shape), std::move(values)));
  }
  ckpt.metadata.erase("tensors");
  return ckpt;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers},
          {"num_heads", c.num_heads},
          {"hidden_dim", c.hidden_dim},
          {"ffn_dim", c.ffn_dim},
          {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len},
          {"special",
           {{"pad", c.special.pad}, {"unk", c.special.unk}, {"cls", c.special.cls}, {"sep", c.special.sep},
            {"mask", c.special.mask}}}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  j.at("num_layers").get_to(c.num_layers);
  j.at("num_heads").get_to(c.num_heads);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("ffn_dim").get_to(c.ffn_dim);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_seq_len").get_to(c.max_seq_len);
  const auto& s = j.at("special");
  s.at("pad").get_to(c.special.pad);
  s.at("unk").get_to(c.special.unk);
  s.at("cls").get_to(c.special.cls);
  s.at("sep").get_to(c.special.sep);
  s.at("mask").get_to(c.special.mask);
  c.validate();
  return c;
}

nlohmann::json to_json(const PeftConfig& c) {
  return {{"kind", to_string(c.kind)},          {"reduction_factor", c.reduction_factor}, {"rank", c.rank},
          {"alpha", c.alpha},                   {"prefix_length", c.prefix_length},       {"bottleneck", c.bottleneck}};
}

PeftConfig peft_config_from_json(const nlohmann::json& j) {
  PeftConfig c;
  c.kind = parse_peft_kind(j.at("kind").get<std::string>());
  j.at("reduction_factor").get_to(c.reduction_factor);
  j.at("rank").get_to(c.rank);
  j.at("alpha").get_to(c.alpha);
  j.at("prefix_length").get_to(c.prefix_length);
  j.at("bottleneck").get_to(c.bottleneck);
  return c;
}

Checkpoint make_checkpoint(const EncoderParams& model, const PeftParams* peft, nlohmann::json provenance) {
  Checkpoint ckpt;
  ckpt.metadata["model"] = to_json(model.config);
  ckpt.metadata["provenance"] = std::move(provenance);
  for (const auto& [name, t] : model.named_base()) ckpt.tensors.emplace_back("base." + name, t);
  if (model.head) {
    ckpt.metadata["num_classes"] = model.head->num_classes();
    for (const auto& [name, t] : model.head->named()) ckpt.tensors.emplace_back("head." + name, t);
  }
  if (peft) {
    ckpt.metadata["peft"] = to_json(peft->config);
    ckpt.metadata["peft_exported"] = !peft->prefix.empty() && peft->prefix.front().is_exported();
    for (const auto& [name, t] : peft->named()) ckpt.tensors.emplace_back("peft." + name, t);
  }
  return ckpt;
}

EncoderParams restore_encoder(const Checkpoint& ckpt) {
  const auto config = model_config_from_json(ckpt.metadata.at("model"));
  auto params = EncoderParams::init(config, 0);
  for (const auto& [name, t] : params.named_base()) copy_into(t, require(ckpt, "base." + name), "base." + name);
  if (ckpt.metadata.contains("num_classes")) {
    params.head = ClassifierHead::init(config.hidden_dim, ckpt.metadata.at("num_classes").get<std::size_t>(), 0);
    for (const auto& [name, t] : params.head->named()) copy_into(t, require(ckpt, "head." + name), "head." + name);
  }
  params.set_base_trainable(false);
  return params;
}

std::optional<PeftParams> restore_peft(const Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("peft")) return std::nullopt;
  const auto model = model_config_from_json(ckpt.metadata.at("model"));
  auto peft = attach(peft_config_from_json(ckpt.metadata.at("peft")), model, 0);
  if (ckpt.metadata.value("peft_exported", false)) peft = export_prefix(peft);
  for (const auto& [name, t] : peft.named()) {
    copy_into(t, require(ckpt, "peft." + name), "peft." + name);
    t.set_requires_grad(false);
  }
  return peft;
}

}  // namespace bdw
