#include <doctest.h>

#include <cmath>
#include <numbers>

#include "dcar/diffusion_head.hpp"
#include "dcar/errors.hpp"
#include "support.hpp"

using namespace dcar;

namespace {

DiffusionHeadConfig tiny_head(int64_t layers = 2) {
  DiffusionHeadConfig c;
  c.mlp_layers = layers;
  c.hidden_width = 16;
  c.train_timesteps = 100;
  c.sample_steps = 10;
  c.target_dim = 4;
  c.condition_width = 8;
  c.batch_mul = 1;
  c.normalize_residuals = false;
  c.seed = 2;
  return c;
}

// Independent cumulative-alpha schedule.
double oracle_bar(int64_t t, int64_t T) {
  auto f = [&](double x) {
    double c = std::cos((x / static_cast<double>(T) + 0.008) / 1.008 * std::numbers::pi / 2.0);
    return c * c;
  };
  double bar = 1.0;
  for (int64_t k = 1; k <= t; ++k) {
    double beta = std::min(1.0 - f(static_cast<double>(k)) / f(static_cast<double>(k - 1)), 0.999);
    bar *= 1.0 - beta;
  }
  return bar;
}

// Predictor that knows the clean target exactly.
EpsPredictor oracle_predictor(const NoiseSchedule& s, torch::Tensor x0) {
  return [&s, x0](const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor&) {
    auto bar = s.alphas_cumprod_tensor().index_select(0, t).to(x_t.scalar_type()).unsqueeze(1);
    auto target = x0.size(0) == x_t.size(0) ? x0 : x0.repeat({x_t.size(0) / x0.size(0), 1});
    return (x_t - bar.sqrt() * target) / (1.0 - bar).sqrt();
  };
}

std::vector<uint64_t> seeds(int64_t m, uint64_t base = 0) {
  std::vector<uint64_t> s;
  for (int64_t i = 0; i < m; ++i) s.push_back(mix_seed(base, static_cast<uint64_t>(i)));
  return s;
}

}  // namespace

TEST_CASE("noise schedule matches the cosine law") {
  NoiseSchedule s(1000);
  CHECK(s.alpha_cumprod(0) == 1.0);
  for (int64_t t : {1, 10, 250, 500, 900, 999, 1000}) {
    CHECK(s.alpha_cumprod(t) == doctest::Approx(oracle_bar(t, 1000)).epsilon(1e-9));
  }
  for (int64_t t = 1; t <= 1000; ++t) {
    CHECK_MESSAGE(s.alpha_cumprod(t) < s.alpha_cumprod(t - 1), t);
  }
  CHECK(s.alpha_cumprod(1000) > 0.0);
  CHECK_THROWS_AS(s.alpha_cumprod(1001), InvalidArgument);

  auto r = s.respaced(4);
  CHECK(r == std::vector<int64_t>{1000, 750, 500, 250});
  CHECK(s.respaced(1) == std::vector<int64_t>{1000});
  CHECK_THROWS_AS(s.respaced(0), InvalidArgument);
}

TEST_CASE("forward noising") {
  NoiseSchedule s(100);
  dcar::test::Gen gen(1);
  auto x0 = gen.normal({6, 4});
  auto eps = gen.normal({6, 4});
  CHECK(dcar::test::bit_equal(add_noise(s, x0, 0, eps), x0));
  auto pure = add_noise(s, torch::zeros({6, 4}), 40, eps);
  CHECK(dcar::test::max_abs(pure - std::sqrt(1.0 - oracle_bar(40, 100)) * eps) < 1e-6);

  auto t = torch::tensor({1, 5, 20, 50, 99, 100}, torch::kLong);
  auto x_t = add_noise(s, x0, t, eps);
  for (int64_t i = 0; i < 6; ++i) {
    double bar = oracle_bar(t[i].item<int64_t>(), 100);
    auto expect = std::sqrt(bar) * x0[i] + std::sqrt(1.0 - bar) * eps[i];
    CHECK(dcar::test::max_abs(x_t[i] - expect) < 1e-6);
  }
}

TEST_CASE("loss of a zero predictor is the target dimension") {
  NoiseSchedule s(100);
  dcar::test::Gen gen(2);
  const int64_t d = 6;
  auto x0 = gen.normal({20000, d});
  EpsPredictor zero = [](const torch::Tensor& x, const torch::Tensor&, const torch::Tensor&) {
    return torch::zeros_like(x);
  };
  Rng rng(3);
  auto loss = diffusion_loss(x0, torch::zeros({20000, 1}), zero, s, rng).item<double>();
  CHECK(std::abs(loss - d) / d < 0.02);
}

TEST_CASE("loss of a perfect predictor is zero") {
  NoiseSchedule s(100);
  dcar::test::Gen gen(4);
  auto x0 = gen.normal({64, 4}).to(torch::kDouble);
  Rng rng(5);
  auto loss = diffusion_loss(x0, torch::zeros({64, 1}), oracle_predictor(s, x0), s, rng, 3).item<double>();
  CHECK(loss < 1e-12);
}

TEST_CASE("untrained head predicts zero noise") {
  DiffusionHead head(tiny_head());
  dcar::test::Gen gen(6);
  auto out = head->forward(gen.normal({5, 4}), torch::tensor({1, 2, 3, 50, 100}, torch::kLong), gen.normal({5, 8}));
  CHECK(out.sizes().equals({5, 4}));
  CHECK(dcar::test::max_abs(out) == 0.0);
  CHECK_THROWS_AS(head->forward(gen.normal({5, 3}), torch::ones({5}, torch::kLong), gen.normal({5, 8})),
                  InvalidArgument);
}

TEST_CASE("head loss gradients match finite differences") {
  auto cfg = tiny_head(2);
  DiffusionHead head(cfg);
  head->to(torch::kDouble);
  dcar::test::Gen gen(7);
  {
    // leave the zero-initialized output layer so every parameter receives gradient
    torch::NoGradGuard g;
    for (auto& p : head->parameters()) p.add_(gen.normal(p.sizes().vec(), 0.1).to(torch::kDouble));
  }
  auto x0 = gen.normal({6, 4}).to(torch::kDouble);
  auto cond = gen.normal({6, 8}).to(torch::kDouble);
  auto loss_at = [&] {
    Rng rng(11);
    return diffusion_loss(x0, cond, head, rng);
  };
  head->zero_grad();
  loss_at().backward();
  torch::NoGradGuard g;
  int checked = 0;
  for (auto& p : head->parameters()) {
    auto flat = p.view(-1);
    auto grad = p.grad().view(-1);
    for (int64_t k = 0; k < std::min<int64_t>(flat.size(0), 3); ++k) {
      const double h = 1e-6;
      const double orig = flat[k].item<double>();
      flat[k].fill_(orig + h);
      double up = loss_at().item<double>();
      flat[k].fill_(orig - h);
      double down = loss_at().item<double>();
      flat[k].fill_(orig);
      double fd = (up - down) / (2 * h);
      CHECK(std::abs(fd - grad[k].item<double>()) < 1e-3 * std::max(1.0, std::abs(fd)));
      ++checked;
    }
  }
  CHECK(checked > 20);
}

TEST_CASE("reverse process with an ideal predictor returns the target") {
  NoiseSchedule s(100);
  dcar::test::Gen gen(8);
  auto x0 = gen.normal({5, 4});
  for (int64_t steps : {1, 2, 10, 100}) {
    auto out = denoise_normalized(torch::zeros({5, 1}), oracle_predictor(s, x0), s, 4, steps, seeds(5));
    CHECK_MESSAGE(dcar::test::max_abs(out - x0) < 1e-3, steps);
  }
}

TEST_CASE("clipping bounds the reverse process for any predictor") {
  NoiseSchedule s(1000);
  for (uint64_t trial = 0; trial < 12; ++trial) {
    dcar::test::Gen gen(300 + trial);
    const double offset = gen.real(-0.2, 0.2);
    const double clip = gen.real(0.5, 5.0);
    // eps slightly off everywhere: the high-noise steps amplify the error
    EpsPredictor biased = [offset](const torch::Tensor& x_t, const torch::Tensor&, const torch::Tensor&) {
      return x_t + offset;
    };
    const int64_t steps = 1 + gen.rng.randint(40);
    auto out = denoise_normalized(torch::zeros({7, 1}), biased, s, 3, steps, seeds(7, trial), {}, clip);
    CHECK(dcar::test::max_abs(out) <= clip + 1e-6);
    if (steps > 1 && std::abs(offset) > 0.05) {
      auto raw = denoise_normalized(torch::zeros({7, 1}), biased, s, 3, steps, seeds(7, trial));
      CHECK(dcar::test::max_abs(raw) > clip);
    }
  }
  // an ideal predictor inside the bound is unaffected
  dcar::test::Gen gen(8);
  auto x0 = gen.normal({5, 4}).clamp(-2.0, 2.0);
  auto out = denoise_normalized(torch::zeros({5, 1}), oracle_predictor(s, x0), s, 4, 20, seeds(5), {}, 3.0);
  CHECK(dcar::test::max_abs(out - x0) < 1e-3);
}

TEST_CASE("reverse process is deterministic and row local") {
  DiffusionHead head(tiny_head());
  dcar::test::Gen gen(9);
  {
    torch::NoGradGuard g;
    for (auto& p : head->parameters()) p.add_(gen.normal(p.sizes().vec(), 0.1));
  }
  head->set_stats({torch::tensor({0.5f, -1.0f, 0.0f, 2.0f}), torch::tensor({1.0f, 2.0f, 0.5f, 3.0f})});
  auto cond = gen.normal({6, 8});
  auto sd = seeds(6, 42);
  auto a = denoise(cond, head, 5, sd);
  auto b = denoise(cond, head, 5, sd);
  CHECK(dcar::test::bit_equal(a, b));
  CHECK(a.sizes().equals({6, 4}));

  auto perm = std::vector<int64_t>{3, 5, 0, 1, 4, 2};
  std::vector<uint64_t> psd;
  for (auto i : perm) psd.push_back(sd[static_cast<size_t>(i)]);
  auto pidx = torch::tensor(perm, torch::kLong);
  auto pa = denoise(cond.index_select(0, pidx), head, 5, psd);
  CHECK(dcar::test::max_abs(pa - a.index_select(0, pidx)) < 1e-5);

  auto g1 = denoise(cond, head, 5, sd, {1.0, gen.normal({6, 8})});
  CHECK(dcar::test::max_abs(g1 - a) < 1e-5);
  CHECK_THROWS_AS(denoise(cond, head, 5, seeds(5)), InvalidArgument);
  CHECK_THROWS_AS(denoise(cond, head, 101, sd), InvalidArgument);
}

TEST_CASE("residual normalization round trip") {
  dcar::test::Gen gen(10);
  ResidualStats st{gen.normal({4}), gen.normal({4}).abs() + 0.1};
  st.validate();
  auto rows = gen.normal({30, 4}, 3.0);
  CHECK(dcar::test::max_abs(st.denormalize(st.normalize(rows)) - rows) < 1e-5);
  ResidualStats bad{torch::zeros({4}), torch::tensor({1.0f, 0.0f, 1.0f, 1.0f})};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  auto cfg = tiny_head();
  cfg.normalize_residuals = true;
  DiffusionHead head(cfg);
  Rng rng(1);
  CHECK_THROWS_AS(diffusion_loss(rows, gen.normal({30, 8}), head, rng), ConfigError);
}
