#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "dcar/data.hpp"
#include "dcar/diffusion_head.hpp"
#include "dcar/generator_trainer.hpp"
#include "dcar/mask_transformer.hpp"
#include "dcar/sampler.hpp"
#include "dcar/tokenizer.hpp"
#include "dcar/tokenizer_trainer.hpp"

namespace dcar {

// Two-resolution generator recipe: pre-train at low_resolution, then
// fine-tune at high_resolution from the low-resolution weights.
struct RecipeConfig {
  bool two_stage = true;
  int64_t low_resolution = 32;
  int64_t high_resolution = 64;
  int64_t lowres_steps = 2000;
  int64_t highres_steps = 500;
};

struct ExperimentConfig {
  uint64_t seed = 0;
  std::string output_dir = "runs/default";
  TokenizerConfig tokenizer;
  TokenizerTrainConfig tokenizer_train;
  GeneratorConfig generator;
  DiffusionHeadConfig head;
  GeneratorTrainConfig generator_train;
  SamplerConfig sampler;
  DatasetSpec train_data;
  DatasetSpec val_data;
  RecipeConfig recipe;

  void validate() const;
  // Propagates the experiment seed to every component seed.
  void apply_seed(uint64_t seed);
};

// Unknown keys raise ConfigError; missing keys keep their defaults.
void to_json(nlohmann::json& j, const TokenizerConfig& c);
void from_json(const nlohmann::json& j, TokenizerConfig& c);
void to_json(nlohmann::json& j, const TokenizerTrainConfig& c);
void from_json(const nlohmann::json& j, TokenizerTrainConfig& c);
void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);
void to_json(nlohmann::json& j, const DiffusionHeadConfig& c);
void from_json(const nlohmann::json& j, DiffusionHeadConfig& c);
void to_json(nlohmann::json& j, const GeneratorTrainConfig& c);
void from_json(const nlohmann::json& j, GeneratorTrainConfig& c);
void to_json(nlohmann::json& j, const SamplerConfig& c);
void from_json(const nlohmann::json& j, SamplerConfig& c);
void to_json(nlohmann::json& j, const DatasetSpec& c);
void from_json(const nlohmann::json& j, DatasetSpec& c);
void to_json(nlohmann::json& j, const RecipeConfig& c);
void from_json(const nlohmann::json& j, RecipeConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_experiment_config(const std::filesystem::path& path);
void save_experiment_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

// FNV-1a over the canonical (sorted-key, compact) JSON text, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);
uint64_t fnv1a64(const std::string& bytes);

}  // namespace dcar
