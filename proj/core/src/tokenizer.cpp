#include "dcar/tokenizer.hpp"

#include <bit>
#include <string>

#include "dcar/errors.hpp"

namespace dcar {
namespace F = torch::nn::functional;

namespace {

int64_t norm_groups(int64_t channels) {
  for (int64_t g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

}  // namespace

int64_t TokenizerConfig::stage_width(int64_t stage) const {
  int64_t w = base_width;
  for (int64_t s = 0; s < stage && w < max_width; ++s) w *= 2;
  return std::min(w, max_width);
}

void TokenizerConfig::validate() const {
  const auto f = static_cast<uint64_t>(compression_factor);
  if (compression_factor < 4 || !std::has_single_bit(f)) {
    throw ConfigError("compression factor must be a power of two >= 4, got " +
                      std::to_string(compression_factor));
  }
  if (compression_factor > 32) throw ConfigError("compression factors above 32 are unsupported");
  if (static_cast<int64_t>(std::countr_zero(f)) != num_stages()) {
    throw ConfigError("stage_depths must have log2(compression_factor) entries");
  }
  for (auto d : stage_depths) {
    if (d < 0) throw ConfigError("stage depth must be non-negative");
  }
  if (latent_channels < 1 || base_width < 1 || max_width < base_width) {
    throw ConfigError("invalid tokenizer widths");
  }
  if (codebook_size < 2) throw ConfigError("codebook needs at least two entries");
}

const char* to_string(Path p) { return p == Path::discrete ? "discrete" : "continuous"; }

ResBlockImpl::ResBlockImpl(int64_t channels) {
  norm1_ = register_module("norm1", torch::nn::GroupNorm(norm_groups(channels), channels));
  conv1_ = register_module("conv1", conv3x3(channels, channels));
  norm2_ = register_module("norm2", torch::nn::GroupNorm(norm_groups(channels), channels));
  conv2_ = register_module("conv2", conv3x3(channels, channels));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv1_(F::silu(norm1_(x)));
  h = conv2_(F::silu(norm2_(h)));
  return x + h;
}

DownsampleImpl::DownsampleImpl(int64_t in_channels, int64_t out_channels, bool shortcut)
    : out_channels_(out_channels), shortcut_(shortcut) {
  conv_ = register_module("conv", conv3x3(in_channels, out_channels, 2));
  if (shortcut_ && (4 * in_channels) % out_channels != 0) {
    throw ConfigError("space-to-channel shortcut needs 4*in divisible by out channels");
  }
}

torch::Tensor DownsampleImpl::forward(const torch::Tensor& x) {
  auto y = conv_(x);
  if (!shortcut_) return y;
  auto s = F::pixel_unshuffle(x, 2);
  const auto group = s.size(1) / out_channels_;
  s = s.reshape({s.size(0), out_channels_, group, s.size(2), s.size(3)}).mean(2);
  return y + s;
}

UpsampleImpl::UpsampleImpl(int64_t in_channels, int64_t out_channels) {
  conv_ = register_module("conv", conv3x3(in_channels, out_channels));
}

torch::Tensor UpsampleImpl::forward(const torch::Tensor& x) {
  auto up = F::interpolate(
      x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
  return conv_(up);
}

EncoderImpl::EncoderImpl(const TokenizerConfig& cfg) {
  const auto n = cfg.num_stages();
  conv_in_ = register_module("conv_in", conv3x3(cfg.image_channels, cfg.stage_width(0)));
  for (int64_t s = 0; s < n; ++s) {
    const auto w = cfg.stage_width(s);
    const auto w_next = cfg.stage_width(std::min(s + 1, n - 1));
    for (int64_t b = 0; b < cfg.stage_depths[static_cast<size_t>(s)]; ++b) stages_->push_back(ResBlock(w));
    stages_->push_back(Downsample(w, w_next, s == n - 1));
  }
  register_module("stages", stages_);
  const auto w_last = cfg.stage_width(n - 1);
  norm_out_ = register_module("norm_out", torch::nn::GroupNorm(norm_groups(w_last), w_last));
  conv_out_ = register_module("conv_out", conv3x3(w_last, cfg.latent_channels));
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& image) {
  auto h = stages_->forward(conv_in_(image));
  return conv_out_(F::silu(norm_out_(h)));
}

DecoderImpl::DecoderImpl(const TokenizerConfig& cfg) {
  const auto n = cfg.num_stages();
  const auto w_last = cfg.stage_width(n - 1);
  conv_in_ = register_module("conv_in", conv3x3(cfg.latent_channels, w_last));
  int64_t w_prev = w_last;
  for (int64_t s = n - 1; s >= 0; --s) {
    const auto w = cfg.stage_width(s);
    stages_->push_back(Upsample(w_prev, w));
    for (int64_t b = 0; b < cfg.stage_depths[static_cast<size_t>(s)]; ++b) stages_->push_back(ResBlock(w));
    w_prev = w;
  }
  register_module("stages", stages_);
  norm_out_ = register_module("norm_out", torch::nn::GroupNorm(norm_groups(w_prev), w_prev));
  conv_out_ = register_module("conv_out", conv3x3(w_prev, cfg.image_channels));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& latent) {
  auto h = stages_->forward(conv_in_(latent));
  return conv_out_(F::silu(norm_out_(h)));
}

TokenizerModelImpl::TokenizerModelImpl(TokenizerConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  torch::manual_seed(cfg_.seed);
  encoder_ = register_module("encoder", Encoder(cfg_));
  decoder_ = register_module("decoder", Decoder(cfg_));
  codebook_ = register_module("codebook",
                              Codebook(cfg_.codebook_size, cfg_.latent_channels, mix_seed(cfg_.seed, 1)));
}

LatentGrid TokenizerModelImpl::encode(const ImageTensor& image) {
  grid_shape(image.height(), image.width(), cfg_.compression_factor);
  if (image.channels() != cfg_.image_channels) {
    throw InvalidArgument("image has " + std::to_string(image.channels()) + " channels, expected " +
                          std::to_string(cfg_.image_channels));
  }
  return LatentGrid(encoder_->forward(image.data().to(torch::kFloat)));
}

ImageTensor TokenizerModelImpl::decode(const LatentGrid& latent) {
  if (latent.channels() != cfg_.latent_channels) {
    throw InvalidArgument("latent has " + std::to_string(latent.channels()) +
                          " channels, decoder expects " + std::to_string(cfg_.latent_channels));
  }
  auto out = decoder_->forward(latent.data().to(torch::kFloat));
  if (!is_training()) out = out.clamp(-1.0, 1.0);
  return ImageTensor(out);
}

ImageTensor TokenizerModelImpl::reconstruct(const ImageTensor& image, Path path) {
  auto z = encode(image);
  if (path == Path::continuous) return decode(z);
  auto [tokens, zq] = codebook_->quantize(z, is_training());
  return decode(straight_through(z, zq));
}

std::pair<TokenIndexGrid, QuantizedGrid> TokenizerModelImpl::tokenize(const ImageTensor& image,
                                                                      bool track_usage) {
  torch::NoGradGuard no_grad;
  return codebook_->quantize(encode(image), track_usage);
}

int64_t TokenizerModelImpl::parameter_count() const { return count_parameters(parameters()); }

int64_t count_parameters(const std::vector<torch::Tensor>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

}  // namespace dcar
