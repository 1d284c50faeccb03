#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dcar/diffusion_head.hpp"
#include "dcar/mask_transformer.hpp"
#include "dcar/tokenizer.hpp"

namespace dcar {

// Layout (all integers little-endian):
//   magic "DCARCKPT" | u32 version | u32 kind | str config_json
//   u64 tensor_count | { str name | u8 dtype | u32 ndim | i64 dims[ndim] | raw data }
//   u8 has_stats | [ u64 D | f64 mean[D] | f64 std[D] ]
//   str rng_state
// where str = u64 length + bytes.
inline constexpr uint32_t kCheckpointVersion = 1;

enum class ComponentKind : uint32_t { tokenizer = 1, generator = 2, head = 3 };
const char* to_string(ComponentKind k);

struct Checkpoint {
  uint32_t version = kCheckpointVersion;
  ComponentKind kind = ComponentKind::tokenizer;
  nlohmann::json config;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;
  std::optional<ResidualStats> stats;
  std::string rng_state;

  const torch::Tensor* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Parameters then buffers, in registration order, under `prefix`.
void collect_state(const torch::nn::Module& module, const std::string& prefix,
                   std::vector<std::pair<std::string, torch::Tensor>>& out);
// Throws InvalidArgument on a missing tensor or shape mismatch.
void restore_state(torch::nn::Module& module, const std::string& prefix, const Checkpoint& ckpt);

// config = {"tokenizer": ..., "meta": meta}
Checkpoint tokenizer_checkpoint(TokenizerModel& model, const nlohmann::json& meta = nlohmann::json::object(),
                                const std::string& rng_state = "");
TokenizerModel tokenizer_from_checkpoint(const Checkpoint& ckpt);

// Generator checkpoints carry the diffusion head and its residual statistics.
// config = {"generator": ..., "head": ..., "meta": meta}
Checkpoint generator_checkpoint(MaskTransformer& generator, DiffusionHead& head,
                                const nlohmann::json& meta = nlohmann::json::object(),
                                const std::string& rng_state = "");
std::pair<MaskTransformer, DiffusionHead> generator_from_checkpoint(const Checkpoint& ckpt);

Checkpoint head_checkpoint(DiffusionHead& head, const std::string& rng_state = "");
DiffusionHead head_from_checkpoint(const Checkpoint& ckpt);

}  // namespace dcar
