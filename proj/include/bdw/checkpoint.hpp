#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bdw/model.hpp"
#include "bdw/peft.hpp"

#include "json.hpp"

namespace bdw {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Container layout: 8-byte magic, u32 version, u8 little-endian flag, u64
/// metadata length, metadata JSON, then every tensor's doubles in the order
/// listed under metadata["tensors"].
struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PeftConfig& config);
PeftConfig peft_config_from_json(const nlohmann::json& j);

/// Packs base tensors (prefixed "base."), the head ("head.") and PEFT
/// tensors ("peft.") with their configs; `provenance` is stored verbatim.
Checkpoint make_checkpoint(const EncoderParams& model, const PeftParams* peft, nlohmann::json provenance);

EncoderParams restore_encoder(const Checkpoint& ckpt);
std::optional<PeftParams> restore_peft(const Checkpoint& ckpt);

}  // namespace bdw
