#include "dcar/quantizer.hpp"

#include <ATen/Parallel.h>

#include <cmath>
#include <limits>

#include "dcar/errors.hpp"

namespace dcar {
namespace {

struct StraightThroughFn : public torch::autograd::Function<StraightThroughFn> {
  static torch::Tensor forward(torch::autograd::AutogradContext*, const torch::Tensor& z,
                               const torch::Tensor& zq) {
    (void)z;
    return zq.clone();
  }
  static torch::autograd::tensor_list backward(torch::autograd::AutogradContext*,
                                               torch::autograd::tensor_list grads) {
    return {grads[0], torch::Tensor()};
  }
};

}  // namespace

CodebookImpl::CodebookImpl(int64_t size, int64_t dim, uint64_t seed) : size_(size), dim_(dim) {
  if (size < 2) throw InvalidArgument("codebook needs at least two entries");
  if (dim < 1) throw InvalidArgument("codebook dimension must be positive");
  Rng rng(seed);
  const double bound = 1.0 / static_cast<double>(size);
  auto init = (rng.uniform_tensor({size, dim}) * 2.0 - 1.0) * bound;
  entries_ = register_parameter("entries", init);
  usage_counts_ = register_buffer("usage_counts", torch::zeros({size}, torch::kLong));
  epoch_usage_ = torch::zeros({size}, torch::kLong);
}

torch::Tensor nearest_entries(const torch::Tensor& rows, const torch::Tensor& entries) {
  auto r = rows.detach().to(torch::kFloat).contiguous();
  auto e = entries.detach().to(torch::kFloat).contiguous();
  const int64_t m = r.size(0), n = e.size(0), d = e.size(1);
  if (r.size(1) != d) throw InvalidArgument("row width does not match codebook dimension");
  auto out = torch::empty({m}, torch::kLong);
  const float* rp = r.data_ptr<float>();
  const float* ep = e.data_ptr<float>();
  int64_t* op = out.data_ptr<int64_t>();
  at::parallel_for(0, m, 64, [&](int64_t begin, int64_t end) {
    for (int64_t i = begin; i < end; ++i) {
      const float* x = rp + i * d;
      double best = std::numeric_limits<double>::infinity();
      int64_t best_j = 0;
      for (int64_t j = 0; j < n; ++j) {
        const float* c = ep + j * d;
        double dist = 0.0;
        for (int64_t k = 0; k < d; ++k) {
          const double diff = static_cast<double>(x[k]) - static_cast<double>(c[k]);
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          best_j = j;
        }
      }
      op[i] = best_j;
    }
  });
  return out;
}

std::pair<TokenIndexGrid, QuantizedGrid> CodebookImpl::quantize(const LatentGrid& z,
                                                                bool track_usage) {
  if (z.channels() != dim_) {
    throw InvalidArgument("latent has " + std::to_string(z.channels()) +
                          " channels, codebook expects " + std::to_string(dim_));
  }
  const auto b = z.batch(), h = z.height(), w = z.width();
  auto idx = nearest_entries(to_token_rows(z.data()), entries_);
  if (track_usage) {
    auto counts = torch::bincount(idx, {}, size_);
    std::lock_guard<std::mutex> lock(usage_mutex_);
    usage_counts_.add_(counts);
    epoch_usage_.add_(counts);
  }
  TokenIndexGrid tokens(idx.reshape({b, h, w}));
  return {tokens, dequantize(tokens)};
}

QuantizedGrid CodebookImpl::dequantize(const TokenIndexGrid& tokens) const {
  const auto& idx = tokens.indices();
  if (idx.numel() > 0 && (idx.min().item<int64_t>() < 0 || idx.max().item<int64_t>() >= size_)) {
    throw InvalidArgument("token index outside codebook range");
  }
  auto rows = entries_.index_select(0, idx.reshape({-1}));
  return QuantizedGrid(from_token_rows(rows, tokens.batch(), tokens.height(), tokens.width()));
}

UsageReport CodebookImpl::usage_report() const {
  std::lock_guard<std::mutex> lock(usage_mutex_);
  UsageReport report;
  auto counts = usage_counts_.to(torch::kDouble);
  const double total = counts.sum().item<double>();
  report.total = static_cast<int64_t>(total);
  if (total <= 0) return report;
  report.utilization = counts.gt(0).to(torch::kDouble).mean().item<double>();
  auto p = counts / total;
  auto nz = p.masked_select(p.gt(0));
  report.entropy = -(nz * nz.log()).sum().item<double>();
  return report;
}

void CodebookImpl::reset_usage() {
  std::lock_guard<std::mutex> lock(usage_mutex_);
  usage_counts_.zero_();
  epoch_usage_.zero_();
}

void CodebookImpl::reset_epoch_usage() {
  std::lock_guard<std::mutex> lock(usage_mutex_);
  epoch_usage_.zero_();
}

int64_t CodebookImpl::reseed_dead(const torch::Tensor& candidates, Rng& rng) {
  std::lock_guard<std::mutex> lock(usage_mutex_);
  auto dead = epoch_usage_.eq(0).nonzero().reshape({-1});
  const int64_t n_dead = dead.size(0);
  if (n_dead > 0 && candidates.size(0) > 0) {
    auto pick = rng.randint_tensor(0, candidates.size(0), {n_dead});
    torch::NoGradGuard no_grad;
    entries_.index_copy_(0, dead, candidates.detach().to(torch::kFloat).index_select(0, pick));
  }
  epoch_usage_.zero_();
  return candidates.size(0) > 0 ? n_dead : 0;
}

torch::Tensor vq_loss(const LatentGrid& z, const QuantizedGrid& zq, double beta) {
  if (!z.data().sizes().equals(zq.data().sizes())) throw InvalidArgument("vq_loss: shape mismatch");
  if (!(beta > 0)) throw InvalidArgument("vq_loss: beta must be positive");
  auto codebook_term = (z.data().detach() - zq.data()).pow(2).mean();
  auto commitment_term = (z.data() - zq.data().detach()).pow(2).mean();
  return codebook_term + beta * commitment_term;
}

LatentGrid straight_through(const LatentGrid& z, const QuantizedGrid& zq) {
  if (!z.data().sizes().equals(zq.data().sizes())) {
    throw InvalidArgument("straight_through: shape mismatch");
  }
  return LatentGrid(StraightThroughFn::apply(z.data(), zq.data()));
}

}  // namespace dcar
