#pragma once

#include <cstdint>
#include <utility>

#include <torch/torch.h>

namespace dcar {

// All grids are channel-major: (batch, channel, row, column).

namespace detail {

class FloatGrid {
 public:
  FloatGrid() = default;
  explicit FloatGrid(torch::Tensor data);

  const torch::Tensor& data() const { return data_; }
  int64_t batch() const { return data_.size(0); }
  int64_t channels() const { return data_.size(1); }
  int64_t height() const { return data_.size(2); }
  int64_t width() const { return data_.size(3); }
  int64_t tokens_per_sample() const { return height() * width(); }
  bool all_finite() const;
  bool defined() const { return data_.defined(); }

 private:
  torch::Tensor data_;
};

}  // namespace detail

// Pixels in [-1, 1]; height and width are multiples of the compression factor.
class ImageTensor : public detail::FloatGrid {
 public:
  using FloatGrid::FloatGrid;
  bool in_unit_range() const;
};

// Continuous encoder output Z.
class LatentGrid : public detail::FloatGrid {
 public:
  using FloatGrid::FloatGrid;
};

// Dequantized codebook vectors Z_q.
class QuantizedGrid : public detail::FloatGrid {
 public:
  using FloatGrid::FloatGrid;
};

// Z_r = Z - Z_q.
class ResidualGrid : public detail::FloatGrid {
 public:
  using FloatGrid::FloatGrid;
};

// Codebook indices, batch x h x w, int64.
class TokenIndexGrid {
 public:
  TokenIndexGrid() = default;
  explicit TokenIndexGrid(torch::Tensor indices);

  const torch::Tensor& indices() const { return indices_; }
  int64_t batch() const { return indices_.size(0); }
  int64_t height() const { return indices_.size(1); }
  int64_t width() const { return indices_.size(2); }
  int64_t tokens_per_sample() const { return height() * width(); }

 private:
  torch::Tensor indices_;
};

// Residual arithmetic is carried out in float64. A float32 difference z - zq
// is exactly representable in float64 whenever the operands are within 2^29
// of each other in magnitude, so decompose and recombine invert each other
// bit-exactly for every realistic latent.
ResidualGrid decompose(const LatentGrid& z, const QuantizedGrid& zq);
LatentGrid recombine(const ResidualGrid& zr, const QuantizedGrid& zq);

// Latent grid extent for an image of height x width under factor f.
std::pair<int64_t, int64_t> grid_shape(int64_t height, int64_t width, int64_t factor);

// (B, D, h, w) <-> (B*h*w, D), rows ordered by batch then raster position.
torch::Tensor to_token_rows(const torch::Tensor& grid);
torch::Tensor from_token_rows(const torch::Tensor& rows, int64_t batch, int64_t height,
                              int64_t width);

}  // namespace dcar
