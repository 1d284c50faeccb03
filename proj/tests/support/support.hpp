#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dcar/rng.hpp"

namespace dcar::test {

// Hand-rolled generators for property tests.
struct Gen {
  explicit Gen(uint64_t seed) : rng(seed) {}

  int64_t range(int64_t lo, int64_t hi) { return lo + rng.randint(hi - lo + 1); }  // inclusive
  double real(double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

  torch::Tensor normal(std::vector<int64_t> shape, double scale = 1.0) {
    return (rng.normal_tensor(shape) * scale).to(torch::kFloat);
  }
  // Values with magnitudes spread across several binades.
  torch::Tensor spread(std::vector<int64_t> shape) {
    auto mag = torch::pow(2.0, rng.uniform_tensor(shape) * 12.0 - 6.0);
    auto sign = torch::where(rng.uniform_tensor(shape) < 0.5, -1.0, 1.0);
    return (mag * sign).to(torch::kFloat);
  }
  std::vector<int64_t> grid_shape(int64_t max_batch = 3, int64_t max_ch = 6, int64_t max_side = 5) {
    return {range(1, max_batch), range(1, max_ch), range(1, max_side), range(1, max_side)};
  }

  Rng rng;
};

inline bool bit_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes().equals(b.sizes()) && a.scalar_type() == b.scalar_type() && torch::equal(a, b);
}

inline double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dcar_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace dcar::test
