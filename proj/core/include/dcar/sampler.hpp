#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dcar/diffusion_head.hpp"
#include "dcar/latent.hpp"
#include "dcar/mask_transformer.hpp"
#include "dcar/rng.hpp"
#include "dcar/tokenizer.hpp"

namespace dcar {

struct SamplerConfig {
  int64_t steps = 12;
  double temperature = 4.5;
  double cfg_scale = 4.5;
  std::string cfg_schedule = "constant";
  int64_t diffusion_steps = 20;
  bool head_guidance = true;
  bool discrete_only = false;  // residuals forced to zero
  uint64_t seed = 0;

  void validate() const;
};

// Number of positions committed at each of the K steps.
std::vector<int64_t> unmask_schedule(int64_t n_tokens, int64_t steps);
// Masked count remaining after steps 0..K (entry 0 is n_tokens).
std::vector<int64_t> masked_after_steps(int64_t n_tokens, int64_t steps);

torch::Tensor cfg_combine(const torch::Tensor& cond_logits, const torch::Tensor& uncond_logits, double scale);

MaskState fully_masked(int64_t batch, int64_t height, int64_t width);

// Steps (2)-(4) of one unmasking step given already-guided logits
// (batch x n x vocab). rngs holds one stream per image.
MaskState commit_step(const MaskState& state, const torch::Tensor& logits, const SamplerConfig& cfg, int64_t k,
                      std::vector<Rng>& rngs);

MaskState sample_step(const MaskState& state, MaskTransformer& generator, const ConditionEmbedding& cond,
                      const SamplerConfig& cfg, int64_t k, std::vector<Rng>& rngs);

struct GenerationResult {
  ImageTensor images;
  TokenIndexGrid tokens;
  ResidualGrid residual;
};

// Seeds for each image default to mix_seed(cfg.seed, i).
GenerationResult generate(const ConditionEmbedding& cond, MaskTransformer& generator, DiffusionHead& head,
                          TokenizerModel& tokenizer, const SamplerConfig& cfg, int64_t grid_h, int64_t grid_w,
                          std::vector<uint64_t> image_seeds = {});

void check_compatible(const MaskTransformer& generator, const DiffusionHead& head, const TokenizerModel& tokenizer);

}  // namespace dcar
