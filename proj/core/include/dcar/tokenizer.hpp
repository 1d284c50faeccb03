#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "dcar/latent.hpp"
#include "dcar/quantizer.hpp"

namespace dcar {

struct TokenizerConfig {
  int64_t compression_factor = 8;
  int64_t latent_channels = 8;
  int64_t base_width = 64;
  int64_t max_width = 256;
  // Residual blocks per downsampling stage; one entry per factor of two.
  std::vector<int64_t> stage_depths{1, 1, 1};
  int64_t codebook_size = 512;
  int64_t image_channels = 3;
  uint64_t seed = 0;

  int64_t num_stages() const { return static_cast<int64_t>(stage_depths.size()); }
  int64_t stage_width(int64_t stage) const;
  void validate() const;
};

enum class Path { discrete, continuous };

const char* to_string(Path p);

class ResBlockImpl : public torch::nn::Module {
 public:
  explicit ResBlockImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};
TORCH_MODULE(ResBlock);

// Stride-2 convolution, optionally with a space-to-channel shortcut that
// folds each 2x2 patch into channels and averages channel groups.
class DownsampleImpl : public torch::nn::Module {
 public:
  DownsampleImpl(int64_t in_channels, int64_t out_channels, bool shortcut);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int64_t out_channels_;
  bool shortcut_;
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(Downsample);

class UpsampleImpl : public torch::nn::Module {
 public:
  UpsampleImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(Upsample);

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const TokenizerConfig& cfg);
  torch::Tensor forward(const torch::Tensor& image);

 private:
  torch::nn::Conv2d conv_in_{nullptr}, conv_out_{nullptr};
  torch::nn::Sequential stages_;
  torch::nn::GroupNorm norm_out_{nullptr};
};
TORCH_MODULE(Encoder);

class DecoderImpl : public torch::nn::Module {
 public:
  explicit DecoderImpl(const TokenizerConfig& cfg);
  torch::Tensor forward(const torch::Tensor& latent);

 private:
  torch::nn::Conv2d conv_in_{nullptr}, conv_out_{nullptr};
  torch::nn::Sequential stages_;
  torch::nn::GroupNorm norm_out_{nullptr};
};
TORCH_MODULE(Decoder);

// Fully convolutional encoder/decoder pair sharing one codebook. Decoding
// accepts both quantized and continuous latents.
class TokenizerModelImpl : public torch::nn::Module {
 public:
  explicit TokenizerModelImpl(TokenizerConfig cfg);

  LatentGrid encode(const ImageTensor& image);
  // Output is clamped to [-1, 1] in eval mode only.
  ImageTensor decode(const LatentGrid& latent);
  ImageTensor reconstruct(const ImageTensor& image, Path path);

  // Continuous latent -> (tokens, dequantized) without gradient bookkeeping.
  std::pair<TokenIndexGrid, QuantizedGrid> tokenize(const ImageTensor& image,
                                                    bool track_usage = false);

  Encoder& encoder() { return encoder_; }
  Decoder& decoder() { return decoder_; }
  Codebook& codebook() { return codebook_; }
  const TokenizerConfig& config() const { return cfg_; }

  std::vector<torch::Tensor> encoder_parameters() const { return encoder_->parameters(); }
  std::vector<torch::Tensor> decoder_parameters() const { return decoder_->parameters(); }
  std::vector<torch::Tensor> quantizer_parameters() const { return codebook_->parameters(); }
  int64_t parameter_count() const;

 private:
  TokenizerConfig cfg_;
  Encoder encoder_{nullptr};
  Decoder decoder_{nullptr};
  Codebook codebook_{nullptr};
};
TORCH_MODULE(TokenizerModel);

// Number of elements in a parameter list.
int64_t count_parameters(const std::vector<torch::Tensor>& params);

}  // namespace dcar
