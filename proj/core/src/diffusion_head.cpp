#include "dcar/diffusion_head.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "dcar/errors.hpp"

namespace dcar {
namespace F = torch::nn::functional;

void DiffusionHeadConfig::validate() const {
  if (mlp_layers < 2) throw ConfigError("diffusion head needs at least two MLP layers");
  if (train_timesteps < 1) throw ConfigError("train_timesteps must be positive");
  if (sample_steps < 1 || sample_steps > train_timesteps) {
    throw ConfigError("sample_steps must lie in [1, train_timesteps]");
  }
  if (target_dim < 1 || hidden_width < 2 || hidden_width % 2 != 0 || condition_width < 1) {
    throw ConfigError("invalid diffusion head widths");
  }
  if (batch_mul < 1) throw ConfigError("batch_mul must be >= 1");
  if (!(clip_denoised >= 0)) throw ConfigError("clip_denoised must be >= 0");
}

NoiseSchedule::NoiseSchedule(int64_t timesteps) : timesteps_(timesteps) {
  if (timesteps < 1) throw InvalidArgument("noise schedule needs at least one timestep");
  constexpr double s = 0.008;
  auto f = [&](double t) {
    const double c = std::cos((t / static_cast<double>(timesteps) + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  alphas_cumprod_.resize(static_cast<size_t>(timesteps + 1));
  alphas_cumprod_[0] = 1.0;
  const double f0 = f(0.0);
  double prev_bar = 1.0;
  for (int64_t t = 1; t <= timesteps; ++t) {
    const double bar = f(static_cast<double>(t)) / f0;
    const double beta = std::min(1.0 - bar / prev_bar, 0.999);
    prev_bar = bar;
    alphas_cumprod_[static_cast<size_t>(t)] = alphas_cumprod_[static_cast<size_t>(t - 1)] * (1.0 - beta);
  }
}

double NoiseSchedule::alpha_cumprod(int64_t t) const {
  if (t < 0 || t > timesteps_) {
    throw InvalidArgument("timestep " + std::to_string(t) + " outside [0, " + std::to_string(timesteps_) + "]");
  }
  return alphas_cumprod_[static_cast<size_t>(t)];
}

torch::Tensor NoiseSchedule::alphas_cumprod_tensor() const {
  return torch::tensor(alphas_cumprod_, torch::kDouble);
}

std::vector<int64_t> NoiseSchedule::respaced(int64_t steps) const {
  if (steps < 1 || steps > timesteps_) {
    throw InvalidArgument("sampling steps " + std::to_string(steps) + " outside [1, " +
                          std::to_string(timesteps_) + "]");
  }
  std::vector<int64_t> out;
  out.reserve(static_cast<size_t>(steps));
  for (int64_t i = steps; i >= 1; --i) {
    out.push_back(static_cast<int64_t>(std::llround(static_cast<double>(timesteps_) * static_cast<double>(i) /
                                                    static_cast<double>(steps))));
  }
  return out;
}

torch::Tensor ResidualStats::normalize(const torch::Tensor& rows) const {
  return (rows - mean.to(rows.scalar_type())) / std.to(rows.scalar_type());
}

torch::Tensor ResidualStats::denormalize(const torch::Tensor& rows) const {
  return rows * std.to(rows.scalar_type()) + mean.to(rows.scalar_type());
}

void ResidualStats::validate() const {
  if (!mean.defined() || !std.defined() || mean.dim() != 1 || !mean.sizes().equals(std.sizes())) {
    throw ConfigError("residual stats must hold matching per-channel mean and std vectors");
  }
  auto acc = std.accessor<float, 1>();
  for (int64_t c = 0; c < std.size(0); ++c) {
    if (!(acc[c] > 0.0f)) throw ConfigError("residual std must be positive (channel " + std::to_string(c) + ")");
  }
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat) / static_cast<double>(half));
  auto args = t.to(torch::kFloat).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::cos(args), torch::sin(args)}, 1);
}

DiffusionHeadImpl::DiffusionHeadImpl(DiffusionHeadConfig cfg) : cfg_(std::move(cfg)), schedule_(cfg_.train_timesteps) {
  cfg_.validate();
  torch::manual_seed(cfg_.seed);
  const auto w = cfg_.hidden_width;
  input_proj_ = register_module("input_proj", torch::nn::Linear(cfg_.target_dim, w));
  cond_proj_ = register_module("cond_proj", torch::nn::Linear(cfg_.condition_width, w));
  time_mlp_ = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(w, w), torch::nn::SiLU(),
                                                                 torch::nn::Linear(w, w)));
  for (int64_t i = 0; i < cfg_.mlp_layers; ++i) {
    const auto tag = std::to_string(i);
    norms_.push_back(register_module(
        "norm" + tag, torch::nn::LayerNorm(torch::nn::LayerNormOptions({w}).elementwise_affine(false).eps(1e-6))));
    mlps_.push_back(register_module("mlp" + tag, torch::nn::Sequential(torch::nn::Linear(w, w), torch::nn::SiLU(),
                                                                       torch::nn::Linear(w, w))));
    auto mod = torch::nn::Linear(w, 3 * w);
    torch::nn::init::zeros_(mod->weight);
    torch::nn::init::zeros_(mod->bias);
    modulations_.push_back(register_module("modulation" + tag, mod));
  }
  final_norm_ = register_module(
      "final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({w}).elementwise_affine(false).eps(1e-6)));
  final_modulation_ = register_module("final_modulation", torch::nn::Linear(w, 2 * w));
  final_proj_ = register_module("final_proj", torch::nn::Linear(w, cfg_.target_dim));
  torch::nn::init::zeros_(final_modulation_->weight);
  torch::nn::init::zeros_(final_modulation_->bias);
  torch::nn::init::zeros_(final_proj_->weight);
  torch::nn::init::zeros_(final_proj_->bias);
}

void DiffusionHeadImpl::set_stats(ResidualStats stats) {
  stats.validate();
  if (stats.mean.size(0) != cfg_.target_dim) throw ConfigError("residual stats width does not match target_dim");
  stats_ = std::move(stats);
}

torch::Tensor DiffusionHeadImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond) {
  if (x_t.dim() != 2 || x_t.size(1) != cfg_.target_dim) {
    throw InvalidArgument("diffusion head: x_t must be M x " + std::to_string(cfg_.target_dim));
  }
  if (cond.dim() != 2 || cond.size(0) != x_t.size(0) || cond.size(1) != cfg_.condition_width) {
    throw InvalidArgument("diffusion head: cond must be M x " + std::to_string(cfg_.condition_width));
  }
  if (t.numel() != x_t.size(0)) throw InvalidArgument("diffusion head: one timestep per row expected");
  const auto dtype = input_proj_->weight.scalar_type();
  auto x = input_proj_(x_t.to(dtype));
  auto temb = timestep_embedding(t.reshape({-1}), cfg_.hidden_width).to(dtype);
  auto c = time_mlp_->forward(temb) + cond_proj_(cond.to(dtype));
  auto c_act = F::silu(c);
  for (size_t i = 0; i < mlps_.size(); ++i) {
    auto mod = modulations_[i](c_act).chunk(3, 1);
    auto h = norms_[i](x) * (1 + mod[1]) + mod[0];
    x = x + mod[2] * mlps_[i]->forward(h);
  }
  auto mod = final_modulation_(c_act).chunk(2, 1);
  return final_proj_(final_norm_(x) * (1 + mod[1]) + mod[0]);
}

torch::Tensor add_noise(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                        const torch::Tensor& eps) {
  if (!x0.sizes().equals(eps.sizes())) throw InvalidArgument("add_noise: x0 and eps shapes differ");
  auto tt = t.to(torch::kLong).reshape({-1});
  if (tt.numel() > 0 && (tt.min().item<int64_t>() < 0 || tt.max().item<int64_t>() > schedule.timesteps())) {
    throw InvalidArgument("add_noise: timestep outside [0, T]");
  }
  auto bar = schedule.alphas_cumprod_tensor().index_select(0, tt);
  if (tt.numel() != 1) {
    if (x0.dim() < 1 || x0.size(0) != tt.numel()) throw InvalidArgument("add_noise: one timestep per row expected");
    std::vector<int64_t> shape(static_cast<size_t>(x0.dim()), 1);
    shape[0] = tt.numel();
    bar = bar.reshape(shape);
  } else {
    bar = bar.reshape({});
  }
  auto a = bar.sqrt().to(x0.scalar_type());
  auto b = (1.0 - bar).sqrt().to(x0.scalar_type());
  return a * x0 + b * eps;
}

torch::Tensor add_noise(const NoiseSchedule& schedule, const torch::Tensor& x0, int64_t t, const torch::Tensor& eps) {
  if (t < 0 || t > schedule.timesteps()) throw InvalidArgument("add_noise: timestep outside [0, T]");
  if (!x0.sizes().equals(eps.sizes())) throw InvalidArgument("add_noise: x0 and eps shapes differ");
  const double bar = schedule.alpha_cumprod(t);
  if (t == 0) return x0.clone();
  return std::sqrt(bar) * x0 + std::sqrt(1.0 - bar) * eps;
}

torch::Tensor diffusion_loss(const torch::Tensor& x0, const torch::Tensor& cond, const EpsPredictor& predictor,
                             const NoiseSchedule& schedule, Rng& rng, int64_t batch_mul) {
  if (x0.dim() != 2 || cond.dim() != 2 || x0.size(0) != cond.size(0)) {
    throw InvalidArgument("diffusion_loss: expected one condition row per target row");
  }
  auto x = batch_mul > 1 ? x0.repeat({batch_mul, 1}) : x0;
  auto c = batch_mul > 1 ? cond.repeat({batch_mul, 1}) : cond;
  auto t = rng.randint_tensor(1, schedule.timesteps() + 1, {x.size(0)});
  auto eps = rng.normal_tensor(x.sizes()).to(x.scalar_type());
  auto x_t = add_noise(schedule, x, t, eps);
  auto pred = predictor(x_t, t, c);
  return (eps - pred).pow(2).sum(1).mean();
}

torch::Tensor diffusion_loss(const torch::Tensor& residual_rows, const torch::Tensor& cond, DiffusionHead& head,
                             Rng& rng) {
  auto x0 = residual_rows.to(head->parameters().front().scalar_type());
  if (head->config().normalize_residuals) {
    if (!head->stats()) throw ConfigError("diffusion_loss: residual statistics missing");
    x0 = head->stats()->normalize(x0);
  }
  EpsPredictor predictor = [&](const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& c) {
    return head->forward(x_t, t, c);
  };
  return diffusion_loss(x0, cond, predictor, head->schedule(), rng, head->config().batch_mul);
}

torch::Tensor denoise_normalized(const torch::Tensor& cond, const EpsPredictor& predictor,
                                 const NoiseSchedule& schedule, int64_t target_dim, int64_t steps,
                                 const std::vector<uint64_t>& row_seeds, const DenoiseGuidance& guidance,
                                 double clip_x0) {
  const auto timesteps = schedule.respaced(steps);
  const int64_t m = cond.size(0);
  if (static_cast<int64_t>(row_seeds.size()) != m) throw InvalidArgument("denoise: one seed per row required");
  const bool guided = guidance.uncond.defined();
  if (guided && !guidance.uncond.sizes().equals(cond.sizes())) {
    throw InvalidArgument("denoise: unconditional rows must match conditional rows");
  }

  // noise[k] holds the k-th draw of every row: k = 0 is the starting sample.
  const int64_t draws = steps + 1;
  auto noise = torch::empty({draws, m, target_dim}, torch::kFloat);
  auto acc = noise.accessor<float, 3>();
  std::mt19937_64 engine;
  for (int64_t p = 0; p < m; ++p) {
    engine.seed(row_seeds[static_cast<size_t>(p)]);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    for (int64_t k = 0; k < draws; ++k) {
      for (int64_t d = 0; d < target_dim; ++d) acc[k][p][d] = normal(engine);
    }
  }

  auto c_in = guided ? torch::cat({cond, guidance.uncond}, 0) : cond;
  auto x = noise[0].clone();
  for (size_t i = 0; i < timesteps.size(); ++i) {
    const int64_t t = timesteps[i];
    const int64_t t_prev = i + 1 < timesteps.size() ? timesteps[i + 1] : 0;
    const double bar = schedule.alpha_cumprod(t);
    const double bar_prev = schedule.alpha_cumprod(t_prev);

    auto x_in = guided ? torch::cat({x, x}, 0) : x;
    auto t_in = torch::full({x_in.size(0)}, t, torch::kLong);
    auto eps = predictor(x_in, t_in, c_in);
    if (guided) {
      auto parts = eps.chunk(2, 0);
      eps = parts[1] + guidance.scale * (parts[0] - parts[1]);
    }
    auto x0_hat = (x - std::sqrt(1.0 - bar) * eps) / std::sqrt(bar);
    if (clip_x0 > 0) x0_hat = x0_hat.clamp(-clip_x0, clip_x0);
    const double beta = 1.0 - bar / bar_prev;
    const double c0 = std::sqrt(bar_prev) * beta / (1.0 - bar);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - bar_prev) / (1.0 - bar);
    x = c0 * x0_hat + ct * x;
    if (t_prev > 0) {
      const double var = beta * (1.0 - bar_prev) / (1.0 - bar);
      x = x + std::sqrt(var) * noise[static_cast<int64_t>(i) + 1];
    }
  }
  return x;
}

torch::Tensor denoise(const torch::Tensor& cond, DiffusionHead& head, int64_t steps,
                      const std::vector<uint64_t>& row_seeds, const DenoiseGuidance& guidance) {
  const auto& cfg = head->config();
  if (steps > cfg.train_timesteps) throw InvalidArgument("denoise: steps exceed the training schedule");
  if (cfg.normalize_residuals && !head->stats()) throw ConfigError("denoise: residual statistics missing");
  torch::NoGradGuard no_grad;
  const bool was_training = head->is_training();
  head->eval();
  EpsPredictor predictor = [&](const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& c) {
    return head->forward(x_t, t, c);
  };
  auto x = denoise_normalized(cond, predictor, head->schedule(), cfg.target_dim, steps, row_seeds, guidance,
                              cfg.clip_denoised);
  if (was_training) head->train();
  return cfg.normalize_residuals ? head->stats()->denormalize(x) : x;
}

}  // namespace dcar
