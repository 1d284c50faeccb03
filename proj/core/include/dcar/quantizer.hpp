#pragma once

#include <cstdint>
#include <mutex>
#include <utility>

#include <torch/torch.h>

#include "dcar/latent.hpp"
#include "dcar/rng.hpp"

namespace dcar {

struct UsageReport {
  double utilization = 0.0;  // fraction of entries selected at least once
  double entropy = 0.0;      // nats, over the empirical usage distribution
  int64_t total = 0;         // vectors quantized since the last reset
};

// N x D vector-quantization codebook with usage statistics.
class CodebookImpl : public torch::nn::Module {
 public:
  CodebookImpl(int64_t size, int64_t dim, uint64_t seed = 0);

  // Nearest entry by squared Euclidean distance, ties to the lowest index.
  std::pair<TokenIndexGrid, QuantizedGrid> quantize(const LatentGrid& z, bool track_usage = true);

  // Differentiable lookup into the entries.
  QuantizedGrid dequantize(const TokenIndexGrid& tokens) const;

  UsageReport usage_report() const;
  void reset_usage();
  void reset_epoch_usage();

  // Re-seeds every entry unused since the last call from random rows of
  // `candidates` (M x D encoder outputs) and clears the per-epoch usage.
  int64_t reseed_dead(const torch::Tensor& candidates, Rng& rng);

  int64_t size() const { return size_; }
  int64_t dim() const { return dim_; }
  const torch::Tensor& entries() const { return entries_; }
  const torch::Tensor& usage_counts() const { return usage_counts_; }

 private:
  int64_t size_;
  int64_t dim_;
  torch::Tensor entries_;
  torch::Tensor usage_counts_;
  torch::Tensor epoch_usage_;
  mutable std::mutex usage_mutex_;
};
TORCH_MODULE(Codebook);

// Exhaustive nearest-neighbour scan over M x D rows against N x D entries.
torch::Tensor nearest_entries(const torch::Tensor& rows, const torch::Tensor& entries);

// mean(|sg(z) - zq|^2) + beta * mean(|z - sg(zq)|^2)
torch::Tensor vq_loss(const LatentGrid& z, const QuantizedGrid& zq, double beta = 0.25);

// Forward value is zq bit-for-bit; the gradient flows to z unchanged.
LatentGrid straight_through(const LatentGrid& z, const QuantizedGrid& zq);

}  // namespace dcar
