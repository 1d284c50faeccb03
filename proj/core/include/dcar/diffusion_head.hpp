#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "dcar/rng.hpp"

namespace dcar {

struct DiffusionHeadConfig {
  int64_t mlp_layers = 3;       // adaptive-norm residual MLP blocks
  int64_t hidden_width = 256;
  int64_t train_timesteps = 1000;
  int64_t sample_steps = 20;
  int64_t target_dim = 8;       // latent channels D
  int64_t condition_width = 256;  // transformer hidden width
  int64_t batch_mul = 4;        // noise draws per token during training
  bool normalize_residuals = true;
  double clip_denoised = 4.0;   // bound on predicted x0 while sampling; 0 disables
  uint64_t seed = 0;

  void validate() const;
};

// Cosine cumulative-alpha schedule with a_0 = 1, clipped so a_T > 0.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int64_t timesteps = 1000);

  int64_t timesteps() const { return timesteps_; }
  double alpha_cumprod(int64_t t) const;
  const std::vector<double>& alphas_cumprod() const { return alphas_cumprod_; }
  torch::Tensor alphas_cumprod_tensor() const;

  // Uniformly strided descending sub-schedule of `steps` timesteps,
  // starting at T; the reverse process ends at t = 0 after the last entry.
  std::vector<int64_t> respaced(int64_t steps) const;

 private:
  int64_t timesteps_;
  std::vector<double> alphas_cumprod_;
};

// Per-channel standardization of residual tokens.
struct ResidualStats {
  torch::Tensor mean;  // [D]
  torch::Tensor std;   // [D]

  torch::Tensor normalize(const torch::Tensor& rows) const;
  torch::Tensor denormalize(const torch::Tensor& rows) const;
  void validate() const;
};

// eps-prediction MLP with adaptive layer norm, conditioned on a timestep
// embedding plus one transformer hidden vector per token.
class DiffusionHeadImpl : public torch::nn::Module {
 public:
  explicit DiffusionHeadImpl(DiffusionHeadConfig cfg);

  // x_t: M x D, t: M (int64), cond: M x condition_width -> eps: M x D
  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond);

  const DiffusionHeadConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  const std::optional<ResidualStats>& stats() const { return stats_; }
  void set_stats(ResidualStats stats);

 private:
  DiffusionHeadConfig cfg_;
  NoiseSchedule schedule_;
  std::optional<ResidualStats> stats_;
  torch::nn::Linear input_proj_{nullptr}, cond_proj_{nullptr};
  torch::nn::Sequential time_mlp_{nullptr};
  std::vector<torch::nn::LayerNorm> norms_;
  std::vector<torch::nn::Sequential> mlps_;
  std::vector<torch::nn::Linear> modulations_;
  torch::nn::LayerNorm final_norm_{nullptr};
  torch::nn::Linear final_modulation_{nullptr}, final_proj_{nullptr};
};
TORCH_MODULE(DiffusionHead);

using EpsPredictor =
    std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond)>;

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim);

// x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps, with t a scalar or one entry per row.
torch::Tensor add_noise(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                        const torch::Tensor& eps);
torch::Tensor add_noise(const NoiseSchedule& schedule, const torch::Tensor& x0, int64_t t,
                        const torch::Tensor& eps);

// mean |eps - predictor(x_t, t, cond)|^2 with t ~ U{1..T}, eps ~ N(0, I).
// x0 must already be normalized.
torch::Tensor diffusion_loss(const torch::Tensor& x0, const torch::Tensor& cond,
                             const EpsPredictor& predictor, const NoiseSchedule& schedule, Rng& rng,
                             int64_t batch_mul = 1);

// Head-level loss on raw residual rows; normalizes with the head's stats.
torch::Tensor diffusion_loss(const torch::Tensor& residual_rows, const torch::Tensor& cond,
                             DiffusionHead& head, Rng& rng);

struct DenoiseGuidance {
  double scale = 1.0;
  torch::Tensor uncond;  // M x condition_width; undefined disables guidance
};

// Reverse process on a strided sub-schedule. Every row draws its noise from
// its own seed, so row p's result depends only on cond[p] and seeds[p].
// Returns denormalized residual rows (M x D).
torch::Tensor denoise(const torch::Tensor& cond, DiffusionHead& head, int64_t steps,
                      const std::vector<uint64_t>& row_seeds, const DenoiseGuidance& guidance = {});

// Same reverse process against an arbitrary predictor, in normalized space.
torch::Tensor denoise_normalized(const torch::Tensor& cond, const EpsPredictor& predictor,
                                 const NoiseSchedule& schedule, int64_t target_dim, int64_t steps,
                                 const std::vector<uint64_t>& row_seeds,
                                 const DenoiseGuidance& guidance = {}, double clip_x0 = 0.0);

}  // namespace dcar
