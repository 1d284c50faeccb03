#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dcar/data.hpp"
#include "dcar/features.hpp"
#include "dcar/rng.hpp"
#include "dcar/tokenizer.hpp"

namespace dcar {

struct TokenizerTrainConfig {
  double l2_weight = 1.0;
  double l1_weight = 0.0;
  double perceptual_weight = 1.0;
  double gan_weight = 0.5;
  double vq_beta = 0.25;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double learning_rate = 1e-4;  // constant
  int64_t batch_size = 128;
  int64_t epochs_stage1 = 10;
  int64_t epochs_stage2 = 40;
  int64_t epochs_stage3 = 10;
  double discrete_probability = 0.5;  // per-image path choice in alternating stages
  bool reseed_dead_codes = true;
  int64_t val_images = 256;
  uint64_t seed = 0;

  void validate() const;
};

// alternate_joint is the ablation variant of alternate_finetune with every
// component trainable.
enum class Stage { continuous_warmup = 1, discrete_learning = 2, alternate_finetune = 3, alternate_joint = 4 };
enum class Strategy { three_stage, no_warmup, joint_alternate };

const char* to_string(Stage s);
const char* to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct StageState {
  Stage stage = Stage::continuous_warmup;
  std::vector<std::string> frozen;  // subset of {"encoder", "quantizer"}

  static StageState for_stage(Stage stage);
  bool freezes(const std::string& part) const;
};

// Ordered stages for a strategy and the epochs each receives. Ablation
// strategies keep the total epoch budget of the three-stage schedule.
std::vector<Stage> stage_plan(Strategy strategy);
int64_t stage_epochs(const TokenizerTrainConfig& cfg, Strategy strategy, Stage stage);

class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(int64_t in_channels = 3, int64_t width = 32);
  torch::Tensor forward(const torch::Tensor& image);  // patch logits

 private:
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(Discriminator);

struct GanTerms {
  torch::Tensor generator;      // -mean(D(fake))
  torch::Tensor discriminator;  // mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))
};

GanTerms hinge_terms(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
GanTerms gan_loss(const torch::Tensor& real, const torch::Tensor& fake, Discriminator& disc);

struct LossReport {
  std::map<std::string, double> terms;  // l2, l1, perceptual, gan, vq
  std::map<std::string, double> weights;
  double total = 0.0;
  std::optional<double> discriminator;
  int64_t discrete_images = 0;
  int64_t continuous_images = 0;
};

struct EpochMetrics {
  Stage stage = Stage::continuous_warmup;
  int64_t epoch = 0;  // within the stage
  std::map<std::string, double> mean_terms;
  double val_mse_continuous = 0.0;
  double val_mse_discrete = 0.0;
  double utilization = 0.0;
  int64_t reseeded = 0;
};

nlohmann::json to_json(const EpochMetrics& m);

using MetricsSink = std::function<void(const EpochMetrics&)>;

// Mean squared error of a reconstruction path over the first `max_images`
// images of `dataset`, in eval mode (clamped outputs).
double reconstruction_mse(TokenizerModel& model, const Dataset& dataset, Path path, int64_t max_images,
                          int64_t batch_size = 64);

class TokenizerTrainer {
 public:
  TokenizerTrainer(TokenizerModel model, TokenizerTrainConfig cfg, Strategy strategy = Strategy::three_stage);

  // Applies the freezing contract of `state` and rebuilds the optimizer.
  void enter_stage(const StageState& state);

  LossReport train_step(const ImageTensor& batch, const StageState& state);

  // Runs the next stage of the strategy; throws ConfigError when `stage` is
  // not the next one in the plan.
  std::vector<EpochMetrics> run_stage(const Dataset& train, const Dataset& val, Stage stage,
                                      const MetricsSink& sink = {});

  // Marks every stage up to and including `completed` as done (resume).
  void resume_after(Stage completed);
  std::optional<Stage> next_stage() const;

  TokenizerModel& model() { return model_; }
  Discriminator& discriminator() { return disc_; }
  Rng& rng() { return rng_; }
  const TokenizerTrainConfig& config() const { return cfg_; }
  Strategy strategy() const { return strategy_; }
  const std::vector<EpochMetrics>& history() const { return history_; }

 private:
  TokenizerModel model_;
  TokenizerTrainConfig cfg_;
  Strategy strategy_;
  std::vector<Stage> plan_;
  size_t plan_pos_ = 0;
  Rng rng_;
  Discriminator disc_{nullptr};
  FeatureNet features_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_;
  std::unique_ptr<torch::optim::Adam> disc_opt_;
  std::optional<StageState> current_;
  std::vector<torch::Tensor> candidate_rows_;
  std::vector<EpochMetrics> history_;
};

}  // namespace dcar
