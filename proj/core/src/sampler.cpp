#include "dcar/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "dcar/errors.hpp"

namespace dcar {

void SamplerConfig::validate() const {
  if (steps < 1) throw ConfigError("sampler steps must be >= 1");
  if (temperature < 0) throw ConfigError("temperature must be >= 0");
  if (cfg_scale < 0) throw ConfigError("cfg scale must be >= 0");
  if (cfg_schedule != "constant") throw ConfigError("unsupported cfg schedule '" + cfg_schedule + "'");
  if (diffusion_steps < 1) throw ConfigError("diffusion steps must be >= 1");
}

std::vector<int64_t> masked_after_steps(int64_t n_tokens, int64_t steps) {
  if (steps < 1) throw InvalidArgument("unmask schedule needs at least one step");
  if (steps > n_tokens) {
    throw InvalidArgument("unmask schedule: " + std::to_string(steps) + " steps exceed " +
                          std::to_string(n_tokens) + " tokens");
  }
  std::vector<int64_t> masked{n_tokens};
  for (int64_t k = 1; k <= steps; ++k) {
    const double angle = std::numbers::pi * static_cast<double>(k) / (2.0 * static_cast<double>(steps));
    auto m = static_cast<int64_t>(std::floor(static_cast<double>(n_tokens) * std::cos(angle)));
    if (k == steps) m = 0;
    m = std::min(masked.back() - 1, std::max(m, steps - k));
    masked.push_back(m);
  }
  return masked;
}

std::vector<int64_t> unmask_schedule(int64_t n_tokens, int64_t steps) {
  auto masked = masked_after_steps(n_tokens, steps);
  std::vector<int64_t> counts;
  for (size_t k = 1; k < masked.size(); ++k) counts.push_back(masked[k - 1] - masked[k]);
  return counts;
}

torch::Tensor cfg_combine(const torch::Tensor& cond_logits, const torch::Tensor& uncond_logits, double scale) {
  if (!cond_logits.sizes().equals(uncond_logits.sizes())) throw InvalidArgument("cfg_combine: shape mismatch");
  if (scale == 1.0) return cond_logits.clone();
  if (scale == 0.0) return uncond_logits.clone();
  return uncond_logits + scale * (cond_logits - uncond_logits);
}

MaskState fully_masked(int64_t batch, int64_t height, int64_t width) {
  return {torch::ones({batch, height, width}, torch::kBool), torch::zeros({batch, height, width}, torch::kLong)};
}

MaskState commit_step(const MaskState& state, const torch::Tensor& logits, const SamplerConfig& cfg, int64_t k,
                      std::vector<Rng>& rngs) {
  const auto b = state.batch(), n = state.tokens_per_sample();
  if (k < 1 || k > cfg.steps) throw InvalidArgument("step index outside [1, K]");
  if (static_cast<int64_t>(rngs.size()) != b) throw InvalidArgument("need one rng per image");
  if (logits.dim() != 3 || logits.size(0) != b || logits.size(1) != n) {
    throw InvalidArgument("logits must be batch x n_tokens x vocab");
  }
  const auto schedule = masked_after_steps(n, cfg.steps);
  const int64_t expected = schedule[static_cast<size_t>(k - 1)];
  const int64_t commit = expected - schedule[static_cast<size_t>(k)];
  const double tau = cfg.temperature * (1.0 - static_cast<double>(k) / static_cast<double>(cfg.steps));

  auto logp = torch::log_softmax(logits.to(torch::kDouble), -1).contiguous();
  const auto vocab = logp.size(2);
  auto mask = state.mask.reshape({b, n}).to(torch::kBool).clone();
  auto committed = state.committed.reshape({b, n}).to(torch::kLong).clone();
  auto m = mask.accessor<bool, 2>();
  auto c = committed.accessor<int64_t, 2>();
  const double* lp = logp.data_ptr<double>();

  for (int64_t i = 0; i < b; ++i) {
    std::vector<int64_t> open;
    for (int64_t p = 0; p < n; ++p) {
      if (m[i][p]) open.push_back(p);
    }
    if (static_cast<int64_t>(open.size()) != expected) {
      throw StateError("image " + std::to_string(i) + " has " + std::to_string(open.size()) +
                       " masked positions, schedule expects " + std::to_string(expected) + " before step " +
                       std::to_string(k));
    }
    auto& rng = rngs[static_cast<size_t>(i)];
    std::vector<int64_t> token(open.size());
    std::vector<double> confidence(open.size());
    for (size_t j = 0; j < open.size(); ++j) {
      const double* row = lp + (i * n + open[j]) * vocab;
      const double u = rng.uniform();
      double acc = 0.0;
      int64_t pick = vocab - 1;
      for (int64_t v = 0; v < vocab; ++v) {
        acc += std::exp(row[v]);
        if (u < acc) {
          pick = v;
          break;
        }
      }
      token[j] = pick;
      const double g = -std::log(-std::log(rng.uniform_open_closed() * (1.0 - 1e-12)));
      confidence[j] = row[pick] + tau * g;
    }
    std::vector<size_t> order(open.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b2) { return confidence[a] > confidence[b2]; });
    for (int64_t j = 0; j < commit; ++j) {
      const auto sel = order[static_cast<size_t>(j)];
      m[i][open[sel]] = false;
      c[i][open[sel]] = token[sel];
    }
  }
  return {mask.view(state.mask.sizes()), committed.view(state.mask.sizes())};
}

namespace {

TransformerOutput guided_forward(MaskTransformer& generator, const MaskState& state, const ConditionEmbedding& cond,
                                 double scale, torch::Tensor* uncond_hidden) {
  const auto b = state.batch();
  if (scale == 1.0 && uncond_hidden == nullptr) return generator->forward(state, cond);
  auto null_cond = generator->null_condition(b, cond.length());
  MaskState doubled{torch::cat({state.mask, state.mask}), torch::cat({state.committed, state.committed})};
  auto out = generator->forward(doubled, ConditionEmbedding{torch::cat({cond.sequence, null_cond.sequence})});
  auto logits_c = out.logits.narrow(0, 0, b), logits_u = out.logits.narrow(0, b, b);
  if (uncond_hidden != nullptr) *uncond_hidden = out.hidden.narrow(0, b, b);
  return {cfg_combine(logits_c, logits_u, scale), out.hidden.narrow(0, 0, b)};
}

}  // namespace

MaskState sample_step(const MaskState& state, MaskTransformer& generator, const ConditionEmbedding& cond,
                      const SamplerConfig& cfg, int64_t k, std::vector<Rng>& rngs) {
  torch::NoGradGuard no_grad;
  auto out = guided_forward(generator, state, cond, cfg.cfg_scale, nullptr);
  return commit_step(state, out.logits, cfg, k, rngs);
}

void check_compatible(const MaskTransformer& generator, const DiffusionHead& head, const TokenizerModel& tokenizer) {
  const auto& g = generator->config();
  const auto& h = head->config();
  const auto& t = tokenizer->config();
  if (g.vocab != t.codebook_size) {
    throw ConfigError("generator vocabulary " + std::to_string(g.vocab) + " does not match codebook size " +
                      std::to_string(t.codebook_size));
  }
  if (h.target_dim != t.latent_channels) {
    throw ConfigError("diffusion head target_dim " + std::to_string(h.target_dim) +
                      " does not match tokenizer latent channels " + std::to_string(t.latent_channels));
  }
  if (h.condition_width != g.width) {
    throw ConfigError("diffusion head condition width does not match generator width");
  }
}

GenerationResult generate(const ConditionEmbedding& cond, MaskTransformer& generator, DiffusionHead& head,
                          TokenizerModel& tokenizer, const SamplerConfig& cfg, int64_t grid_h, int64_t grid_w,
                          std::vector<uint64_t> image_seeds) {
  cfg.validate();
  check_compatible(generator, head, tokenizer);
  torch::NoGradGuard no_grad;
  generator->eval();
  head->eval();
  tokenizer->eval();

  const auto b = cond.batch();
  if (image_seeds.empty()) {
    for (int64_t i = 0; i < b; ++i) image_seeds.push_back(mix_seed(cfg.seed, static_cast<uint64_t>(i)));
  }
  if (static_cast<int64_t>(image_seeds.size()) != b) throw InvalidArgument("need one seed per image");
  std::vector<Rng> rngs;
  for (auto s : image_seeds) rngs.emplace_back(s);

  auto state = fully_masked(b, grid_h, grid_w);
  for (int64_t k = 1; k <= cfg.steps; ++k) state = sample_step(state, generator, cond, cfg, k, rngs);

  TokenIndexGrid tokens(state.committed);
  auto zq = tokenizer->codebook()->dequantize(tokens);
  const auto d = zq.channels();

  torch::Tensor residual_rows;
  if (cfg.discrete_only) {
    residual_rows = torch::zeros({b * grid_h * grid_w, d}, torch::kFloat);
  } else {
    const bool guide = cfg.head_guidance && cfg.cfg_scale != 1.0;
    torch::Tensor uncond_hidden;
    auto out = guided_forward(generator, state, cond, guide ? cfg.cfg_scale : 1.0, guide ? &uncond_hidden : nullptr);
    const auto width = out.hidden.size(2);
    std::vector<uint64_t> row_seeds;
    for (int64_t i = 0; i < b; ++i) {
      const auto base = mix_seed(image_seeds[static_cast<size_t>(i)], 0x5eedULL);
      for (int64_t p = 0; p < grid_h * grid_w; ++p) row_seeds.push_back(mix_seed(base, static_cast<uint64_t>(p)));
    }
    DenoiseGuidance guidance;
    if (guide) {
      guidance.scale = cfg.cfg_scale;
      guidance.uncond = uncond_hidden.reshape({-1, width});
    }
    residual_rows = denoise(out.hidden.reshape({-1, width}), head, cfg.diffusion_steps, row_seeds, guidance);
  }
  ResidualGrid zr(from_token_rows(residual_rows.to(torch::kDouble), b, grid_h, grid_w));
  auto z = recombine(zr, zq);
  auto images = tokenizer->decode(z);
  return {images, tokens, zr};
}

}  // namespace dcar
