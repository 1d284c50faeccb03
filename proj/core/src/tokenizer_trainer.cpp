#include "dcar/tokenizer_trainer.hpp"

#include <algorithm>

#include "dcar/errors.hpp"

namespace dcar {
namespace F = torch::nn::functional;

void TokenizerTrainConfig::validate() const {
  for (double w : {l2_weight, l1_weight, perceptual_weight, gan_weight}) {
    if (w < 0) throw ConfigError("loss weights must be non-negative");
  }
  if (!(vq_beta > 0)) throw ConfigError("vq_beta must be positive");
  if (epochs_stage1 < 1 || epochs_stage2 < 1 || epochs_stage3 < 1) throw ConfigError("stage epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (discrete_probability < 0 || discrete_probability > 1) throw ConfigError("discrete_probability outside [0, 1]");
}

const char* to_string(Stage s) {
  switch (s) {
    case Stage::continuous_warmup: return "continuous_warmup";
    case Stage::discrete_learning: return "discrete_learning";
    case Stage::alternate_finetune: return "alternate_finetune";
    case Stage::alternate_joint: return "alternate_joint";
  }
  return "unknown";
}

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::three_stage: return "three-stage";
    case Strategy::no_warmup: return "no-warmup";
    case Strategy::joint_alternate: return "joint-alternate";
  }
  return "unknown";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "three-stage") return Strategy::three_stage;
  if (s == "no-warmup") return Strategy::no_warmup;
  if (s == "joint-alternate") return Strategy::joint_alternate;
  throw ConfigError("unknown strategy '" + s + "' (expected three-stage, no-warmup or joint-alternate)");
}

StageState StageState::for_stage(Stage stage) {
  StageState s{stage, {}};
  if (stage == Stage::alternate_finetune) s.frozen = {"encoder", "quantizer"};
  return s;
}

bool StageState::freezes(const std::string& part) const {
  return std::find(frozen.begin(), frozen.end(), part) != frozen.end();
}

std::vector<Stage> stage_plan(Strategy strategy) {
  switch (strategy) {
    case Strategy::three_stage:
      return {Stage::continuous_warmup, Stage::discrete_learning, Stage::alternate_finetune};
    case Strategy::no_warmup: return {Stage::discrete_learning, Stage::alternate_finetune};
    case Strategy::joint_alternate: return {Stage::continuous_warmup, Stage::alternate_joint};
  }
  return {};
}

int64_t stage_epochs(const TokenizerTrainConfig& cfg, Strategy strategy, Stage stage) {
  switch (stage) {
    case Stage::continuous_warmup: return cfg.epochs_stage1;
    case Stage::discrete_learning:
      return strategy == Strategy::no_warmup ? cfg.epochs_stage1 + cfg.epochs_stage2 : cfg.epochs_stage2;
    case Stage::alternate_finetune: return cfg.epochs_stage3;
    case Stage::alternate_joint: return cfg.epochs_stage2 + cfg.epochs_stage3;
  }
  return 0;
}

DiscriminatorImpl::DiscriminatorImpl(int64_t in_channels, int64_t width) {
  using namespace torch::nn;
  net_ = register_module(
      "net", Sequential(Conv2d(Conv2dOptions(in_channels, width, 4).stride(2).padding(1)),
                        LeakyReLU(LeakyReLUOptions().negative_slope(0.2)),
                        Conv2d(Conv2dOptions(width, 2 * width, 4).stride(2).padding(1)),
                        GroupNorm(8, 2 * width), LeakyReLU(LeakyReLUOptions().negative_slope(0.2)),
                        Conv2d(Conv2dOptions(2 * width, 1, 3).stride(1).padding(1))));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& image) { return net_->forward(image); }

GanTerms hinge_terms(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  return {-fake_logits.mean(), torch::relu(1.0 - real_logits).mean() + torch::relu(1.0 + fake_logits).mean()};
}

GanTerms gan_loss(const torch::Tensor& real, const torch::Tensor& fake, Discriminator& disc) {
  if (!real.sizes().equals(fake.sizes())) throw InvalidArgument("gan_loss: shape mismatch");
  auto gen = -disc->forward(fake).mean();
  auto d = hinge_terms(disc->forward(real), disc->forward(fake.detach()));
  return {gen, d.discriminator};
}

nlohmann::json to_json(const EpochMetrics& m) {
  nlohmann::json j;
  j["stage"] = to_string(m.stage);
  j["epoch"] = m.epoch;
  j["terms"] = m.mean_terms;
  j["val_mse_continuous"] = m.val_mse_continuous;
  j["val_mse_discrete"] = m.val_mse_discrete;
  j["codebook_utilization"] = m.utilization;
  j["reseeded"] = m.reseeded;
  return j;
}

double reconstruction_mse(TokenizerModel& model, const Dataset& dataset, Path path, int64_t max_images,
                          int64_t batch_size) {
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  const int64_t n = std::min(max_images, dataset.size());
  double sum = 0.0;
  int64_t count = 0;
  for (int64_t b = 0; b < n; b += batch_size) {
    auto batch = load_range(dataset, b, std::min(n, b + batch_size));
    auto recon = model->reconstruct(batch.images, path);
    sum += (recon.data() - batch.images.data()).pow(2).sum().item<double>();
    count += batch.images.data().numel();
  }
  if (was_training) model->train();
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

TokenizerTrainer::TokenizerTrainer(TokenizerModel model, TokenizerTrainConfig cfg, Strategy strategy)
    : model_(std::move(model)), cfg_(std::move(cfg)), strategy_(strategy), plan_(stage_plan(strategy)),
      rng_(cfg_.seed) {
  cfg_.validate();
  torch::manual_seed(mix_seed(cfg_.seed, 7));
  disc_ = Discriminator(model_->config().image_channels);
  features_ = FeatureNet(1234, model_->config().image_channels);
}

void TokenizerTrainer::enter_stage(const StageState& state) {
  const bool freeze_enc = state.freezes("encoder");
  const bool freeze_q = state.freezes("quantizer");
  for (auto& p : model_->encoder_parameters()) p.set_requires_grad(!freeze_enc);
  for (auto& p : model_->quantizer_parameters()) p.set_requires_grad(!freeze_q);
  for (auto& p : model_->decoder_parameters()) p.set_requires_grad(true);
  std::vector<torch::Tensor> trainable;
  for (auto& p : model_->parameters()) {
    if (p.requires_grad()) trainable.push_back(p);
  }
  opt_ = std::make_unique<torch::optim::Adam>(
      trainable, torch::optim::AdamOptions(cfg_.learning_rate).betas({cfg_.beta1, cfg_.beta2}).weight_decay(0.0));
  disc_opt_ = std::make_unique<torch::optim::Adam>(
      disc_->parameters(),
      torch::optim::AdamOptions(cfg_.learning_rate).betas({cfg_.beta1, cfg_.beta2}).weight_decay(0.0));
  current_ = state;
}

LossReport TokenizerTrainer::train_step(const ImageTensor& batch, const StageState& state) {
  if (state.stage == Stage::alternate_finetune) {
    if (!state.freezes("encoder") || !state.freezes("quantizer") || state.frozen.size() != 2) {
      throw ConfigError("alternate fine-tuning requires exactly the encoder and quantizer to be frozen");
    }
  }
  if (!current_ || current_->stage != state.stage || current_->frozen != state.frozen) enter_stage(state);
  if (state.stage == Stage::alternate_finetune) {
    for (const auto& p : model_->encoder_parameters()) {
      if (p.requires_grad()) throw ConfigError("alternate fine-tuning step attempted with an unfrozen encoder");
    }
    for (const auto& p : model_->quantizer_parameters()) {
      if (p.requires_grad()) throw ConfigError("alternate fine-tuning step attempted with an unfrozen quantizer");
    }
  }

  model_->train();
  const auto& images = batch.data();
  const int64_t n = images.size(0);

  std::vector<int64_t> discrete_idx, continuous_idx;
  for (int64_t i = 0; i < n; ++i) {
    bool discrete = false;
    switch (state.stage) {
      case Stage::continuous_warmup: discrete = false; break;
      case Stage::discrete_learning: discrete = true; break;
      default: discrete = rng_.bernoulli(cfg_.discrete_probability); break;
    }
    (discrete ? discrete_idx : continuous_idx).push_back(i);
  }

  auto z = model_->encode(batch).data();
  std::vector<torch::Tensor> latents, targets;
  std::optional<torch::Tensor> vq;
  if (!discrete_idx.empty()) {
    auto idx = torch::tensor(discrete_idx, torch::kLong);
    LatentGrid z_d(z.index_select(0, idx));
    auto [tokens, zq] = model_->codebook()->quantize(z_d, true);
    latents.push_back(straight_through(z_d, zq).data());
    targets.push_back(images.index_select(0, idx));
    vq = vq_loss(z_d, zq, cfg_.vq_beta);
    candidate_rows_.push_back(to_token_rows(z_d.data().detach()));
    if (candidate_rows_.size() > 8) candidate_rows_.erase(candidate_rows_.begin());
  }
  if (!continuous_idx.empty()) {
    auto idx = torch::tensor(continuous_idx, torch::kLong);
    latents.push_back(z.index_select(0, idx));
    targets.push_back(images.index_select(0, idx));
  }
  auto latent = torch::cat(latents, 0);
  auto target = torch::cat(targets, 0);
  auto recon = model_->decode(LatentGrid(latent)).data();

  LossReport report;
  report.discrete_images = static_cast<int64_t>(discrete_idx.size());
  report.continuous_images = static_cast<int64_t>(continuous_idx.size());

  auto l2 = F::mse_loss(recon, target);
  auto l1 = F::l1_loss(recon, target);
  auto total = cfg_.l2_weight * l2 + cfg_.l1_weight * l1;
  report.terms["l2"] = l2.item<double>();
  report.terms["l1"] = l1.item<double>();
  report.weights["l2"] = cfg_.l2_weight;
  report.weights["l1"] = cfg_.l1_weight;
  if (cfg_.perceptual_weight > 0) {
    auto perc = perceptual_distance(features_, recon, target);
    total = total + cfg_.perceptual_weight * perc;
    report.terms["perceptual"] = perc.item<double>();
    report.weights["perceptual"] = cfg_.perceptual_weight;
  }
  if (cfg_.gan_weight > 0) {
    for (auto& p : disc_->parameters()) p.set_requires_grad(false);
    auto gen = -disc_->forward(recon).mean();
    for (auto& p : disc_->parameters()) p.set_requires_grad(true);
    total = total + cfg_.gan_weight * gen;
    report.terms["gan"] = gen.item<double>();
    report.weights["gan"] = cfg_.gan_weight;
  }
  if (vq) {
    total = total + *vq;
    report.terms["vq"] = vq->item<double>();
    report.weights["vq"] = 1.0;
  }

  opt_->zero_grad();
  total.backward();
  opt_->step();
  report.total = total.item<double>();

  if (cfg_.gan_weight > 0) {
    auto d = hinge_terms(disc_->forward(target), disc_->forward(recon.detach()));
    disc_opt_->zero_grad();
    d.discriminator.backward();
    disc_opt_->step();
    report.discriminator = d.discriminator.item<double>();
  }
  return report;
}

std::vector<EpochMetrics> TokenizerTrainer::run_stage(const Dataset& train, const Dataset& val, Stage stage,
                                                      const MetricsSink& sink) {
  if (plan_pos_ >= plan_.size() || plan_[plan_pos_] != stage) {
    std::string expected = plan_pos_ < plan_.size() ? to_string(plan_[plan_pos_]) : "none (strategy complete)";
    throw ConfigError(std::string("stage ") + to_string(stage) + " is out of order for strategy " +
                      to_string(strategy_) + "; expected " + expected);
  }
  const auto state = StageState::for_stage(stage);
  enter_stage(state);
  const bool trains_codebook = !state.freezes("quantizer") && stage != Stage::continuous_warmup;
  const int64_t epochs = stage_epochs(cfg_, strategy_, stage);
  DataLoader loader(std::shared_ptr<const Dataset>(&train, [](const Dataset*) {}), cfg_.batch_size,
                    mix_seed(cfg_.seed, 100 + static_cast<uint64_t>(stage)));
  model_->codebook()->reset_epoch_usage();
  candidate_rows_.clear();

  std::vector<EpochMetrics> out;
  for (int64_t e = 0; e < epochs; ++e) {
    loader.start_epoch(e);
    std::map<std::string, double> sums;
    int64_t steps = 0;
    while (auto b = loader.next()) {
      auto report = train_step(b->images, state);
      for (const auto& [k, v] : report.terms) sums[k] += v;
      sums["total"] += report.total;
      if (report.discriminator) sums["discriminator"] += *report.discriminator;
      ++steps;
    }
    EpochMetrics m;
    m.stage = stage;
    m.epoch = e;
    for (auto& [k, v] : sums) m.mean_terms[k] = v / static_cast<double>(std::max<int64_t>(steps, 1));
    if (trains_codebook && cfg_.reseed_dead_codes && !candidate_rows_.empty()) {
      m.reseeded = model_->codebook()->reseed_dead(torch::cat(candidate_rows_, 0), rng_);
    }
    candidate_rows_.clear();
    m.val_mse_continuous = reconstruction_mse(model_, val, Path::continuous, cfg_.val_images);
    m.val_mse_discrete = reconstruction_mse(model_, val, Path::discrete, cfg_.val_images);
    m.utilization = model_->codebook()->usage_report().utilization;
    history_.push_back(m);
    out.push_back(m);
    if (sink) sink(m);
  }
  ++plan_pos_;
  return out;
}

void TokenizerTrainer::resume_after(Stage completed) {
  auto it = std::find(plan_.begin(), plan_.end(), completed);
  if (it == plan_.end()) {
    throw ConfigError(std::string("stage ") + to_string(completed) + " is not part of strategy " +
                      to_string(strategy_));
  }
  plan_pos_ = static_cast<size_t>(it - plan_.begin()) + 1;
}

std::optional<Stage> TokenizerTrainer::next_stage() const {
  if (plan_pos_ >= plan_.size()) return std::nullopt;
  return plan_[plan_pos_];
}

}  // namespace dcar
