#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dcar/data.hpp"
#include "dcar/diffusion_head.hpp"
#include "dcar/mask_transformer.hpp"
#include "dcar/rng.hpp"
#include "dcar/tokenizer.hpp"

namespace dcar {

struct GeneratorTrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 0.03;
  double beta1 = 0.9;
  double beta2 = 0.96;
  int64_t batch_size = 64;
  int64_t steps = 2000;
  double ce_weight = 1.0;
  double diffusion_weight = 1.0;
  double grad_clip = 0.0;  // 0 disables clipping
  int64_t cache_images = 4096;
  uint64_t seed = 0;

  void validate() const;
};

enum class InitMode { scratch, from_lowres };
const char* to_string(InitMode m);
InitMode init_mode_from_string(const std::string& s);

// Tokenized training set: discrete tokens plus residual rows per image,
// computed once with the frozen tokenizer.
struct LatentCache {
  torch::Tensor tokens;    // M x h x w int64
  torch::Tensor residual;  // M x (h*w) x D float32
  std::vector<int64_t> labels;
  std::vector<int64_t> ids;

  int64_t size() const { return tokens.size(0); }
  int64_t grid_h() const { return tokens.size(1); }
  int64_t grid_w() const { return tokens.size(2); }
};

LatentCache build_latent_cache(const Dataset& dataset, TokenizerModel& tokenizer, int64_t max_images,
                               int64_t batch_size = 64);

struct GeneratorStepRecord {
  int64_t step = 0;
  double ce = 0.0;
  double diffusion = 0.0;
  double total = 0.0;
  double learning_rate = 0.0;
};

nlohmann::json to_json(const GeneratorStepRecord& r);

using StepSink = std::function<void(const GeneratorStepRecord&)>;

class GeneratorTrainer {
 public:
  // With no provider, conditions come from the generator's class table;
  // ConditionMode::none trains unconditionally on the null condition.
  GeneratorTrainer(MaskTransformer generator, DiffusionHead head, GeneratorTrainConfig cfg,
                   ConditionMode mode = ConditionMode::class_label,
                   std::shared_ptr<const ConditionProvider> provider = nullptr);

  GeneratorStepRecord train_step(const LatentCache& cache, const std::vector<int64_t>& indices);
  // Runs cfg.steps steps with seed-deterministic batch selection.
  std::vector<GeneratorStepRecord> train(const LatentCache& cache, const StepSink& sink = {});

  MaskTransformer& generator() { return generator_; }
  DiffusionHead& head() { return head_; }
  Rng& rng() { return rng_; }
  int64_t step() const { return step_; }
  const GeneratorTrainConfig& config() const { return cfg_; }

 private:
  ConditionEmbedding conditions(const LatentCache& cache, const std::vector<int64_t>& indices);

  MaskTransformer generator_;
  DiffusionHead head_;
  GeneratorTrainConfig cfg_;
  ConditionMode mode_;
  std::shared_ptr<const ConditionProvider> provider_;
  Rng rng_;
  std::unique_ptr<torch::optim::AdamW> opt_;
  int64_t step_ = 0;
};

// Generator for a larger grid initialised from a low-resolution one: every
// weight is reused and positional embeddings are interpolated.
MaskTransformer generator_from_lowres(const MaskTransformer& lowres, int64_t grid_h, int64_t grid_w);

}  // namespace dcar
