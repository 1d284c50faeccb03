#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dcar/data.hpp"
#include "dcar/features.hpp"
#include "dcar/latent.hpp"
#include "dcar/tokenizer.hpp"

namespace dcar {

inline constexpr double kPsnrCap = 99.0;

// Inputs in [-1, 1]; computed on the [0, 1] scale.
double psnr(const ImageTensor& a, const ImageTensor& b);
// Mean SSIM over images and channels, 11x11 Gaussian window (sigma 1.5),
// valid region only.
double ssim(const ImageTensor& a, const ImageTensor& b);

// Features are rows (samples x dims). Covariances get 1e-6 added to the diagonal.
double frechet_distance(const torch::Tensor& features_a, const torch::Tensor& features_b);
torch::Tensor extract_features(FeatureNet& net, const torch::Tensor& images, int64_t batch_size = 64);
double fid_proxy(const torch::Tensor& images_a, const torch::Tensor& images_b, FeatureNet& net);

struct MetricReport {
  std::optional<double> psnr;
  std::optional<double> ssim;
  std::optional<double> fid_proxy;
  std::optional<double> codebook_utilization;
  int64_t psnr_samples = 0;
  int64_t ssim_samples = 0;
  int64_t fid_samples = 0;
};

nlohmann::json to_json(const MetricReport& r);
std::string render_table(const std::vector<std::pair<std::string, MetricReport>>& rows);

// Reconstruction metrics over the first max_images of a dataset.
MetricReport evaluate_reconstruction(TokenizerModel& tokenizer, const Dataset& dataset, Path path,
                                     int64_t max_images, FeatureNet& net, int64_t batch_size = 64);

struct ProfileReport {
  double latency_s = 0.0;       // median, batch 1
  double throughput_ips = 0.0;  // median, batch 16
  int64_t latency_batch = 1;
  int64_t throughput_batch = 16;
  int64_t warmup_runs = 0;
  int64_t timed_runs = 0;
  std::vector<double> latency_samples;
  std::vector<double> throughput_samples;
  bool complete = false;
  std::string note = "measured exclusively: no concurrent load permitted while profiling";
  std::string error;
};

nlohmann::json to_json(const ProfileReport& r);
std::string render_table(const ProfileReport& r);

class ProfileFailure : public std::runtime_error {
 public:
  ProfileFailure(const std::string& what, ProfileReport partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const ProfileReport& partial() const { return partial_; }

 private:
  ProfileReport partial_;
};

using Pipeline = std::function<void(int64_t batch)>;

// Warmup runs are discarded; reported values are medians over timed runs.
ProfileReport profile(const Pipeline& run, int64_t warmup_runs = 2, int64_t timed_runs = 5,
                      int64_t latency_batch = 1, int64_t throughput_batch = 16);

double median(std::vector<double> values);

}  // namespace dcar
