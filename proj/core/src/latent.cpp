#include "dcar/latent.hpp"

#include <string>

#include "dcar/errors.hpp"

namespace dcar {
namespace {

std::string shape_str(const torch::Tensor& t) {
  std::string s = "[";
  for (int64_t i = 0; i < t.dim(); ++i) s += (i ? "," : "") + std::to_string(t.size(i));
  return s + "]";
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* op) {
  if (!a.sizes().equals(b.sizes())) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                          shape_str(b));
  }
}

}  // namespace

namespace detail {

FloatGrid::FloatGrid(torch::Tensor data) : data_(std::move(data)) {
  if (!data_.defined() || data_.dim() != 4) {
    throw InvalidArgument("grid must be a rank-4 (batch, channel, row, column) tensor");
  }
  if (!data_.is_floating_point()) throw InvalidArgument("grid must hold floating-point values");
}

bool FloatGrid::all_finite() const { return torch::isfinite(data_).all().item<bool>(); }

}  // namespace detail

bool ImageTensor::in_unit_range() const {
  return data().ge(-1.0).logical_and(data().le(1.0)).all().item<bool>();
}

TokenIndexGrid::TokenIndexGrid(torch::Tensor indices) : indices_(std::move(indices)) {
  if (!indices_.defined() || indices_.dim() != 3 || indices_.scalar_type() != torch::kLong) {
    throw InvalidArgument("token grid must be a rank-3 int64 tensor (batch, row, column)");
  }
}

ResidualGrid decompose(const LatentGrid& z, const QuantizedGrid& zq) {
  require_same_shape(z.data(), zq.data(), "decompose");
  return ResidualGrid(z.data().to(torch::kDouble) - zq.data().to(torch::kDouble));
}

LatentGrid recombine(const ResidualGrid& zr, const QuantizedGrid& zq) {
  require_same_shape(zr.data(), zq.data(), "recombine");
  return LatentGrid(zr.data().to(torch::kDouble) + zq.data().to(torch::kDouble));
}

std::pair<int64_t, int64_t> grid_shape(int64_t height, int64_t width, int64_t factor) {
  if (factor <= 0 || height % factor != 0 || width % factor != 0) {
    throw InvalidArgument("resolution " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not divisible by compression factor " + std::to_string(factor));
  }
  return {height / factor, width / factor};
}

torch::Tensor to_token_rows(const torch::Tensor& grid) {
  const auto b = grid.size(0), d = grid.size(1), h = grid.size(2), w = grid.size(3);
  return grid.permute({0, 2, 3, 1}).reshape({b * h * w, d});
}

torch::Tensor from_token_rows(const torch::Tensor& rows, int64_t batch, int64_t height,
                              int64_t width) {
  if (rows.dim() != 2 || rows.size(0) != batch * height * width) {
    throw InvalidArgument("token rows do not match the requested grid");
  }
  return rows.reshape({batch, height, width, rows.size(1)}).permute({0, 3, 1, 2}).contiguous();
}

}  // namespace dcar
