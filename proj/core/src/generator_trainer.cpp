#include "dcar/generator_trainer.hpp"

#include <algorithm>

#include "dcar/errors.hpp"
#include "dcar/log.hpp"

namespace dcar {

void GeneratorTrainConfig::validate() const {
  if (learning_rate <= 0) throw ConfigError("generator learning rate must be positive");
  if (weight_decay < 0) throw ConfigError("weight decay must be >= 0");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("AdamW betas must lie in [0, 1)");
  if (batch_size < 1 || steps < 1) throw ConfigError("generator batch size and steps must be >= 1");
  if (ce_weight < 0 || diffusion_weight < 0) throw ConfigError("loss weights must be >= 0");
  if (cache_images < 1) throw ConfigError("cache_images must be >= 1");
}

const char* to_string(InitMode m) { return m == InitMode::scratch ? "scratch" : "from_lowres"; }

InitMode init_mode_from_string(const std::string& s) {
  if (s == "scratch") return InitMode::scratch;
  if (s == "from_lowres") return InitMode::from_lowres;
  throw ConfigError("unknown init mode '" + s + "' (expected scratch or from_lowres)");
}

LatentCache build_latent_cache(const Dataset& dataset, TokenizerModel& tokenizer, int64_t max_images,
                               int64_t batch_size) {
  torch::NoGradGuard no_grad;
  tokenizer->eval();
  const auto total = std::min<int64_t>(max_images, dataset.size());
  if (total < 1) throw InvalidArgument("build_latent_cache: empty dataset");
  std::vector<torch::Tensor> tokens, residual;
  LatentCache cache;
  for (int64_t i = 0; i < total; i += batch_size) {
    auto batch = load_range(dataset, i, std::min(total, i + batch_size));
    auto z = tokenizer->encode(batch.images);
    auto [idx, zq] = tokenizer->codebook()->quantize(z, false);
    auto zr = decompose(z, zq);
    tokens.push_back(idx.indices());
    residual.push_back(to_token_rows(zr.data().to(torch::kFloat))
                           .view({z.batch(), z.tokens_per_sample(), z.channels()}));
    cache.labels.insert(cache.labels.end(), batch.labels.begin(), batch.labels.end());
    cache.ids.insert(cache.ids.end(), batch.ids.begin(), batch.ids.end());
  }
  cache.tokens = torch::cat(tokens);
  cache.residual = torch::cat(residual);
  return cache;
}

nlohmann::json to_json(const GeneratorStepRecord& r) {
  return {{"step", r.step}, {"ce", r.ce}, {"diffusion", r.diffusion}, {"total", r.total}, {"lr", r.learning_rate}};
}

GeneratorTrainer::GeneratorTrainer(MaskTransformer generator, DiffusionHead head, GeneratorTrainConfig cfg,
                                   ConditionMode mode, std::shared_ptr<const ConditionProvider> provider)
    : generator_(std::move(generator)),
      head_(std::move(head)),
      cfg_(cfg),
      mode_(mode),
      provider_(std::move(provider)),
      rng_(cfg.seed) {
  cfg_.validate();
  torch::manual_seed(mix_seed(cfg_.seed, 8));
  if (generator_->config().width != head_->config().condition_width) {
    throw ConfigError("diffusion head condition width does not match generator width");
  }
  if (mode_ == ConditionMode::embedding_file && !provider_) {
    throw ConfigError("embedding-file conditioning needs a condition provider");
  }
  std::vector<torch::Tensor> params = generator_->parameters();
  for (auto& p : head_->parameters()) params.push_back(p);
  opt_ = std::make_unique<torch::optim::AdamW>(
      params, torch::optim::AdamWOptions(cfg_.learning_rate)
                  .betas({cfg_.beta1, cfg_.beta2})
                  .weight_decay(cfg_.weight_decay));
}

ConditionEmbedding GeneratorTrainer::conditions(const LatentCache& cache, const std::vector<int64_t>& indices) {
  const auto b = static_cast<int64_t>(indices.size());
  switch (mode_) {
    case ConditionMode::none:
      return generator_->null_condition(b);
    case ConditionMode::embedding_file: {
      std::vector<int64_t> ids;
      for (auto i : indices) ids.push_back(cache.ids[static_cast<size_t>(i)]);
      return provider_->embed(ids);
    }
    case ConditionMode::class_label:
    default: {
      std::vector<int64_t> labels;
      for (auto i : indices) labels.push_back(cache.labels[static_cast<size_t>(i)]);
      return generator_->embed_classes(labels);
    }
  }
}

GeneratorStepRecord GeneratorTrainer::train_step(const LatentCache& cache, const std::vector<int64_t>& indices) {
  generator_->train();
  head_->train();
  auto sel = torch::tensor(indices, torch::kLong);
  TokenIndexGrid tokens(cache.tokens.index_select(0, sel));
  auto residual = cache.residual.index_select(0, sel);

  auto state = sample_train_masks(tokens, rng_);
  auto cond = conditions(cache, indices);
  if (mode_ != ConditionMode::none) {
    auto null_cond = generator_->null_condition(cond.batch(), cond.length());
    cond = condition_dropout(cond, null_cond, generator_->config().condition_dropout, rng_).cond;
  }
  auto out = generator_->forward(tokens, state, cond);
  auto ce = masked_ce_loss(out.logits, tokens, state);
  const auto width = out.hidden.size(2);
  auto diff = diffusion_loss(residual.reshape({-1, residual.size(2)}), out.hidden.reshape({-1, width}), head_, rng_);
  auto total = cfg_.ce_weight * ce + cfg_.diffusion_weight * diff;

  const double lr = cosine_learning_rate(cfg_.learning_rate, step_, cfg_.steps);
  for (auto& group : opt_->param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
  opt_->zero_grad();
  total.backward();
  if (cfg_.grad_clip > 0) {
    std::vector<torch::Tensor> params = generator_->parameters();
    for (auto& p : head_->parameters()) params.push_back(p);
    torch::nn::utils::clip_grad_norm_(params, cfg_.grad_clip);
  }
  opt_->step();
  ++step_;
  return {step_, ce.item<double>(), diff.item<double>(), total.item<double>(), lr};
}

std::vector<GeneratorStepRecord> GeneratorTrainer::train(const LatentCache& cache, const StepSink& sink) {
  if (cache.size() < 1) throw InvalidArgument("generator training needs a non-empty latent cache");
  if (cache.grid_h() * cache.grid_w() < 1) throw InvalidArgument("empty token grid");
  std::vector<GeneratorStepRecord> records;
  const auto bs = std::min(cfg_.batch_size, cache.size());
  std::vector<int64_t> order;
  size_t cursor = 0;
  int64_t epoch = 0;
  while (step_ < cfg_.steps) {
    if (cursor + static_cast<size_t>(bs) > order.size()) {
      Rng perm_rng(mix_seed(cfg_.seed, static_cast<uint64_t>(epoch++)));
      order = perm_rng.permutation(cache.size());
      cursor = 0;
    }
    std::vector<int64_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                             order.begin() + static_cast<std::ptrdiff_t>(cursor) + bs);
    cursor += static_cast<size_t>(bs);
    auto rec = train_step(cache, idx);
    records.push_back(rec);
    if (sink) sink(rec);
  }
  return records;
}

MaskTransformer generator_from_lowres(const MaskTransformer& lowres, int64_t grid_h, int64_t grid_w) {
  auto cfg = lowres->config();
  MaskTransformer target(cfg);
  {
    torch::NoGradGuard no_grad;
    auto src = lowres->named_parameters();
    for (auto& p : target->named_parameters()) p.value().copy_(src[p.key()]);
    auto src_buf = lowres->named_buffers();
    for (auto& b : target->named_buffers()) b.value().copy_(src_buf[b.key()]);
  }
  if (grid_h > cfg.max_grid_h || grid_w > cfg.max_grid_w) target->expand_positional(grid_h, grid_w);
  return target;
}

}  // namespace dcar
