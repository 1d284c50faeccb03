#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace dcar {

// Small fixed random-weight CNN. Weights are a pure function of the seed and
// never trained; gradients still flow to the input so it can back a
// perceptual loss.
class FeatureNetImpl : public torch::nn::Module {
 public:
  explicit FeatureNetImpl(uint64_t seed = 1234, int64_t in_channels = 3);

  std::vector<torch::Tensor> feature_maps(const torch::Tensor& image);
  // Global average-pooled activations of every layer, concatenated.
  torch::Tensor pooled(const torch::Tensor& image);
  int64_t pooled_dim() const;

 private:
  std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(FeatureNet);

// LPIPS-style distance: channel-normalized feature differences averaged
// over positions and summed over layers. Returns the batch mean.
torch::Tensor perceptual_distance(FeatureNet& net, const torch::Tensor& a, const torch::Tensor& b);

}  // namespace dcar
