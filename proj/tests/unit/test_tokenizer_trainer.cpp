#include <doctest.h>

#include "dcar/errors.hpp"
#include "dcar/tokenizer_trainer.hpp"
#include "support.hpp"

using namespace dcar;

namespace {

TokenizerConfig tiny_tokenizer() {
  TokenizerConfig c;
  c.compression_factor = 4;
  c.latent_channels = 4;
  c.base_width = 4;
  c.max_width = 8;
  c.stage_depths = {1, 1};
  c.codebook_size = 16;
  c.seed = 11;
  return c;
}

TokenizerTrainConfig plain_losses() {
  TokenizerTrainConfig c;
  c.perceptual_weight = 0.0;
  c.gan_weight = 0.0;
  c.learning_rate = 1e-3;
  c.batch_size = 8;
  c.epochs_stage1 = 1;
  c.epochs_stage2 = 1;
  c.epochs_stage3 = 1;
  c.val_images = 8;
  c.seed = 3;
  return c;
}

ImageTensor images(int64_t b, int64_t side = 16, uint64_t seed = 1) {
  dcar::test::Gen gen(seed);
  return ImageTensor(gen.normal({b, 3, side, side}).clamp(-1, 1));
}

std::vector<torch::Tensor> snapshot(const std::vector<torch::Tensor>& ps) {
  std::vector<torch::Tensor> out;
  for (const auto& p : ps) out.push_back(p.detach().clone());
  return out;
}

bool all_equal(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (!torch::equal(a[i], b[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("stage 1 never touches the quantizer") {
  TokenizerTrainer t(TokenizerModel(tiny_tokenizer()), plain_losses());
  auto entries = t.model()->codebook()->entries().detach().clone();
  for (int i = 0; i < 3; ++i) {
    auto r = t.train_step(images(4, 16, i), StageState::for_stage(Stage::continuous_warmup));
    CHECK(r.terms.count("vq") == 0);
    CHECK(r.discrete_images == 0);
    CHECK(r.continuous_images == 4);
  }
  CHECK(t.model()->codebook()->usage_report().total == 0);
  CHECK(torch::equal(entries, t.model()->codebook()->entries()));
}

TEST_CASE("stage 2 routes every image through the quantizer") {
  TokenizerTrainer t(TokenizerModel(tiny_tokenizer()), plain_losses());
  auto r = t.train_step(images(4), StageState::for_stage(Stage::discrete_learning));
  CHECK(r.discrete_images == 4);
  CHECK(r.continuous_images == 0);
  CHECK(r.terms.count("vq") == 1);
  CHECK(t.model()->codebook()->usage_report().total == 4 * 4 * 4);
}

TEST_CASE("alternating stage flips a fair coin per image") {
  auto cfg = plain_losses();
  TokenizerTrainer t(TokenizerModel(tiny_tokenizer()), cfg);
  t.resume_after(Stage::discrete_learning);
  auto state = StageState::for_stage(Stage::alternate_finetune);
  int64_t discrete = 0, total = 0;
  for (int i = 0; i < 40; ++i) {
    auto r = t.train_step(images(64, 8, 100 + i), state);
    discrete += r.discrete_images;
    total += r.discrete_images + r.continuous_images;
  }
  CHECK(total == 2560);
  // the per-image choice is drawn from the trainer stream; check it at scale too
  int64_t heads = 0;
  const int64_t draws = 20000;
  for (int64_t i = 0; i < draws; ++i) heads += t.rng().bernoulli(0.5) ? 1 : 0;
  double frac = static_cast<double>(heads + discrete) / static_cast<double>(draws + total);
  CHECK(frac >= 0.48);
  CHECK(frac <= 0.52);
}

TEST_CASE("alternating stage keeps encoder and codebook bit identical") {
  TokenizerTrainer t(TokenizerModel(tiny_tokenizer()), plain_losses());
  t.train_step(images(4), StageState::for_stage(Stage::discrete_learning));
  auto enc = snapshot(t.model()->encoder_parameters());
  auto cb = snapshot(t.model()->quantizer_parameters());
  auto dec = snapshot(t.model()->decoder_parameters());
  auto state = StageState::for_stage(Stage::alternate_finetune);
  for (int i = 0; i < 4; ++i) t.train_step(images(8, 16, 50 + i), state);
  CHECK(all_equal(enc, snapshot(t.model()->encoder_parameters())));
  CHECK(all_equal(cb, snapshot(t.model()->quantizer_parameters())));
  CHECK_FALSE(all_equal(dec, snapshot(t.model()->decoder_parameters())));
}

TEST_CASE("alternating stage refuses an incomplete freeze") {
  TokenizerTrainer t(TokenizerModel(tiny_tokenizer()), plain_losses());
  CHECK_THROWS_AS(t.train_step(images(2), StageState{Stage::alternate_finetune, {}}), ConfigError);
  CHECK_THROWS_AS(t.train_step(images(2), StageState{Stage::alternate_finetune, {"encoder"}}), ConfigError);
  auto s = StageState::for_stage(Stage::alternate_finetune);
  CHECK(s.freezes("encoder"));
  CHECK(s.freezes("quantizer"));
  CHECK(s.frozen.size() == 2);
  CHECK(StageState::for_stage(Stage::alternate_joint).frozen.empty());
}

TEST_CASE("reported total is the weighted sum of the terms") {
  auto cfg = plain_losses();
  cfg.l1_weight = 0.3;
  cfg.perceptual_weight = 0.7;
  cfg.gan_weight = 0.2;
  TokenizerTrainer t(TokenizerModel(tiny_tokenizer()), cfg);
  for (auto stage : {Stage::continuous_warmup, Stage::discrete_learning}) {
    auto r = t.train_step(images(4), StageState::for_stage(stage));
    double sum = 0.0;
    for (const auto& [k, v] : r.terms) sum += r.weights.at(k) * v;
    CHECK(std::abs(sum - r.total) < 1e-6);
    CHECK(r.discriminator.has_value());
  }
}

TEST_CASE("zero adversarial weight removes the discriminator from the objective") {
  auto run = [](double scale) {
    TokenizerTrainer t(TokenizerModel(tiny_tokenizer()), plain_losses());
    {
      torch::NoGradGuard g;
      for (auto& p : t.discriminator()->parameters()) p.mul_(scale);
    }
    return t.train_step(images(4), StageState::for_stage(Stage::continuous_warmup));
  };
  auto a = run(1.0);
  auto b = run(-3.0);
  CHECK(a.total == b.total);
  CHECK(a.terms.count("gan") == 0);
  CHECK_FALSE(a.discriminator.has_value());
}

TEST_CASE("hinge terms") {
  auto logits = torch::tensor({-2.0f, 0.0f, 2.0f});
  auto h = hinge_terms(logits, logits);
  // real: relu(3), relu(1), relu(-1) ; fake: relu(-1), relu(1), relu(3)
  CHECK(h.discriminator.item<double>() == doctest::Approx(8.0 / 3.0));
  CHECK(h.generator.item<double>() == doctest::Approx(0.0));
  auto g = hinge_terms(logits, torch::full({3}, 2.0f));
  CHECK(g.generator.item<double>() == doctest::Approx(-2.0));

  Discriminator d(3, 8);
  auto x = images(2).data();
  auto same = gan_loss(x, x, d);
  CHECK(std::isfinite(same.generator.item<double>()));
  CHECK(std::isfinite(same.discriminator.item<double>()));
}

TEST_CASE("stage plans keep the total epoch budget") {
  TokenizerTrainConfig cfg;
  cfg.epochs_stage1 = 3;
  cfg.epochs_stage2 = 5;
  cfg.epochs_stage3 = 2;
  for (auto s : {Strategy::three_stage, Strategy::no_warmup, Strategy::joint_alternate}) {
    int64_t sum = 0;
    for (auto st : stage_plan(s)) sum += stage_epochs(cfg, s, st);
    CHECK(sum == 10);
  }
  CHECK((stage_plan(Strategy::three_stage) ==
         std::vector<Stage>{Stage::continuous_warmup, Stage::discrete_learning, Stage::alternate_finetune}));
  CHECK((stage_plan(Strategy::no_warmup) == std::vector<Stage>{Stage::discrete_learning, Stage::alternate_finetune}));
  CHECK((stage_plan(Strategy::joint_alternate) ==
         std::vector<Stage>{Stage::continuous_warmup, Stage::alternate_joint}));
  CHECK((strategy_from_string("no-warmup") == Strategy::no_warmup));
  CHECK_THROWS_AS(strategy_from_string("bogus"), ConfigError);
}

TEST_CASE("stages run in order and record validation error") {
  ShapesDataset train(16, 16, Split::train, 1);
  ShapesDataset val(16, 8, Split::val, 1);
  TokenizerTrainer t(TokenizerModel(tiny_tokenizer()), plain_losses());
  CHECK_THROWS_AS(t.run_stage(train, val, Stage::discrete_learning), ConfigError);
  int sunk = 0;
  auto h = t.run_stage(train, val, Stage::continuous_warmup, [&](const EpochMetrics&) { ++sunk; });
  REQUIRE(h.size() == 1);
  CHECK(sunk == 1);
  CHECK(h[0].val_mse_continuous > 0.0);
  CHECK(h[0].val_mse_discrete > 0.0);
  CHECK((t.next_stage() == Stage::discrete_learning));
  auto json = to_json(h[0]);
  CHECK(json.contains("val_mse_continuous"));
  CHECK(json.contains("val_mse_discrete"));

  TokenizerTrainer r(TokenizerModel(tiny_tokenizer()), plain_losses());
  r.resume_after(Stage::discrete_learning);
  CHECK((r.next_stage() == Stage::alternate_finetune));
  CHECK_THROWS_AS(r.resume_after(Stage::alternate_joint), ConfigError);
}
