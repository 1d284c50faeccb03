#include <doctest.h>

#include <cmath>

#include "dcar/errors.hpp"
#include "dcar/evaluator.hpp"
#include "support.hpp"

using namespace dcar;

namespace {

// Direct windowed SSIM on [0, 1] images (single channel, valid region).
double oracle_ssim(const torch::Tensor& a, const torch::Tensor& b) {
  const int64_t h = a.size(0), w = a.size(1), win = 11;
  std::vector<double> g(win);
  double gs = 0.0;
  for (int64_t i = 0; i < win; ++i) {
    double d = static_cast<double>(i - win / 2);
    g[static_cast<size_t>(i)] = std::exp(-d * d / (2 * 1.5 * 1.5));
    gs += g[static_cast<size_t>(i)];
  }
  for (auto& v : g) v /= gs;
  auto ad = a.to(torch::kDouble).contiguous(), bd = b.to(torch::kDouble).contiguous();
  auto x = ad.accessor<double, 2>();
  auto y = bd.accessor<double, 2>();
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  int64_t count = 0;
  for (int64_t r = 0; r + win <= h; ++r) {
    for (int64_t c = 0; c + win <= w; ++c) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (int64_t i = 0; i < win; ++i) {
        for (int64_t j = 0; j < win; ++j) {
          double k = g[static_cast<size_t>(i)] * g[static_cast<size_t>(j)];
          double xv = x[r + i][c + j], yv = y[r + i][c + j];
          mx += k * xv;
          my += k * yv;
          xx += k * xv * xv;
          yy += k * yv * yv;
          xy += k * xv * yv;
        }
      }
      double sx = xx - mx * mx, sy = yy - my * my, sxy = xy - mx * my;
      total += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

ImageTensor gray(const torch::Tensor& unit01) {
  return ImageTensor((unit01 * 2 - 1).to(torch::kFloat).view({1, 1, unit01.size(0), unit01.size(1)}));
}

}  // namespace

TEST_CASE("psnr") {
  dcar::test::Gen gen(1);
  auto a = ImageTensor(gen.normal({2, 3, 8, 8}).clamp(-1, 1));
  CHECK(psnr(a, a) == kPsnrCap);
  // uniform error of 0.5 on the [0, 1] scale
  auto zero = ImageTensor(torch::full({1, 3, 4, 4}, -1.0f));
  auto half = ImageTensor(torch::zeros({1, 3, 4, 4}));
  CHECK(psnr(zero, half) == doctest::Approx(10 * std::log10(4.0)).epsilon(1e-9));
  CHECK(psnr(zero, half) == doctest::Approx(6.0206).epsilon(1e-4));
  CHECK_THROWS_AS(psnr(zero, ImageTensor(torch::zeros({1, 3, 4, 5}))), InvalidArgument);
}

TEST_CASE("ssim of identical images is one and ssim is symmetric") {
  dcar::test::Gen gen(2);
  auto a = ImageTensor(gen.normal({2, 3, 16, 16}, 0.5).clamp(-1, 1));
  auto b = ImageTensor(gen.normal({2, 3, 16, 16}, 0.5).clamp(-1, 1));
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  CHECK(ssim(a, b) < 1.0);
  CHECK_THROWS_AS(ssim(ImageTensor(torch::zeros({1, 3, 8, 8})), ImageTensor(torch::zeros({1, 3, 8, 8}))),
                  InvalidArgument);
}

TEST_CASE("ssim matches a windowed computation") {
  dcar::test::Gen gen(3);
  for (int trial = 0; trial < 4; ++trial) {
    const int64_t h = gen.range(11, 16), w = gen.range(11, 16);
    auto x = gen.rng.uniform_tensor({h, w});
    auto y = (x + gen.rng.uniform_tensor({h, w}) * 0.3).clamp(0, 1);
    CHECK(ssim(gray(x), gray(y)) == doctest::Approx(oracle_ssim(x, y)).epsilon(1e-6));
  }
  // a striped image against its negative is anti-correlated
  auto stripes = (torch::arange(16).remainder(2).to(torch::kDouble) * 0.8 + 0.1).view({1, 16}).expand({16, 16});
  auto neg = 1.0 - stripes;
  const double got = ssim(gray(stripes), gray(neg));
  CHECK(got < 0.0);
  CHECK(got == doctest::Approx(oracle_ssim(stripes, neg)).epsilon(1e-6));
}

TEST_CASE("frechet distance") {
  dcar::test::Gen gen(4);
  auto f = gen.normal({200, 5}).to(torch::kDouble);
  CHECK(std::abs(frechet_distance(f, f)) < 1e-6);
  // one dimension: equal variance, means one apart
  auto a = torch::tensor({-1.0, 1.0}).view({2, 1});
  auto b = torch::tensor({0.0, 2.0}).view({2, 1});
  CHECK(frechet_distance(a, b) == doctest::Approx(1.0).epsilon(1e-9));
  // different scales in one dimension: (sa - sb)^2
  auto c = torch::tensor({-3.0, 3.0}).view({2, 1});
  const double va = 2.0 + 1e-6, vc = 18.0 + 1e-6;
  CHECK(frechet_distance(a, c) == doctest::Approx(va + vc - 2 * std::sqrt(va * vc)).epsilon(1e-9));

  auto near = gen.normal({300, 5}).to(torch::kDouble);
  auto far = gen.normal({300, 5}).to(torch::kDouble) + 3.0;
  CHECK(frechet_distance(f, near) < frechet_distance(f, far));
  CHECK(frechet_distance(f, near) == doctest::Approx(frechet_distance(near, f)).epsilon(1e-6));
  CHECK_THROWS_AS(frechet_distance(f.narrow(0, 0, 1), f), InvalidArgument);
}

TEST_CASE("feature proxy separates distributions") {
  FeatureNet net;
  dcar::test::Gen gen(5);
  auto a = gen.normal({24, 3, 16, 16}, 0.3).clamp(-1, 1);
  auto b = gen.normal({24, 3, 16, 16}, 0.3).clamp(-1, 1);
  auto flat = torch::full({24, 3, 16, 16}, 0.7f) + gen.normal({24, 3, 16, 16}, 0.02);
  CHECK(fid_proxy(a, b, net) < fid_proxy(a, flat, net));
  CHECK(extract_features(net, a, 5).size(0) == 24);
}

TEST_CASE("profile report") {
  int calls = 0;
  auto r = profile([&](int64_t) { ++calls; }, 2, 5);
  CHECK(calls == 2 * (2 + 5));
  CHECK(r.complete);
  CHECK(r.latency_samples.size() == 5);
  CHECK(r.throughput_samples.size() == 5);
  CHECK(r.latency_batch == 1);
  CHECK(r.throughput_batch == 16);
  auto j = to_json(r);
  for (auto key : {"latency_s", "throughput_ips", "warmup_runs", "timed_runs", "complete", "note"}) {
    CHECK_MESSAGE(j.contains(key), key);
  }
  CHECK(j["note"].get<std::string>().find("exclusive") != std::string::npos);
  CHECK_FALSE(render_table(r).empty());

  CHECK_THROWS_AS(profile([](int64_t) {}, 1, 5), ConfigError);
  CHECK_THROWS_AS(profile([](int64_t) {}, 2, 4), ConfigError);

  int n = 0;
  try {
    profile([&](int64_t) {
      if (++n > 4) throw std::runtime_error("boom");
    });
    FAIL("expected a profiling failure");
  } catch (const ProfileFailure& e) {
    CHECK_FALSE(e.partial().complete);
    CHECK(e.partial().latency_samples.size() == 2);
    CHECK(e.partial().error == "boom");
  }
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
}

TEST_CASE("metric report json") {
  MetricReport m;
  m.psnr = 30.0;
  m.psnr_samples = 10;
  auto j = to_json(m);
  CHECK(j["psnr"].get<double>() == 30.0);
  CHECK_FALSE(render_table({{"row", m}}).empty());
}
