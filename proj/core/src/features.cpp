#include "dcar/features.hpp"

#include <array>
#include <cmath>

#include "dcar/rng.hpp"

namespace dcar {
namespace {

constexpr std::array<int64_t, 4> kWidths{16, 32, 64, 64};
constexpr std::array<int64_t, 4> kStrides{1, 2, 2, 2};

}  // namespace

FeatureNetImpl::FeatureNetImpl(uint64_t seed, int64_t in_channels) {
  Rng rng(seed);
  int64_t in = in_channels;
  for (size_t i = 0; i < kWidths.size(); ++i) {
    auto conv = torch::nn::Conv2d(
        torch::nn::Conv2dOptions(in, kWidths[i], 3).stride(kStrides[i]).padding(1).bias(false));
    {
      torch::NoGradGuard no_grad;
      const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
      conv->weight.copy_(rng.normal_tensor(conv->weight.sizes()) * std);
    }
    conv->weight.set_requires_grad(false);
    convs_.push_back(register_module("conv" + std::to_string(i), conv));
    in = kWidths[i];
  }
}

std::vector<torch::Tensor> FeatureNetImpl::feature_maps(const torch::Tensor& image) {
  std::vector<torch::Tensor> out;
  auto h = image.to(torch::kFloat);
  for (auto& conv : convs_) {
    h = torch::relu(conv(h));
    out.push_back(h);
  }
  return out;
}

torch::Tensor FeatureNetImpl::pooled(const torch::Tensor& image) {
  std::vector<torch::Tensor> parts;
  for (const auto& f : feature_maps(image)) parts.push_back(f.mean({2, 3}));
  return torch::cat(parts, 1);
}

int64_t FeatureNetImpl::pooled_dim() const {
  int64_t n = 0;
  for (auto w : kWidths) n += w;
  return n;
}

torch::Tensor perceptual_distance(FeatureNet& net, const torch::Tensor& a, const torch::Tensor& b) {
  auto fa = net->feature_maps(a);
  auto fb = net->feature_maps(b);
  auto total = torch::zeros({}, torch::kFloat);
  for (size_t i = 0; i < fa.size(); ++i) {
    auto na = fa[i] / (fa[i].pow(2).sum(1, true) + 1e-10).sqrt();
    auto nb = fb[i] / (fb[i].pow(2).sum(1, true) + 1e-10).sqrt();
    total = total + (na - nb).pow(2).sum(1).mean();
  }
  return total;
}

}  // namespace dcar
