#include "dcar/evaluator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "dcar/errors.hpp"

namespace dcar {
namespace F = torch::nn::functional;

namespace {

void check_pair(const ImageTensor& a, const ImageTensor& b, const char* what) {
  if (!a.data().sizes().equals(b.data().sizes())) throw InvalidArgument(std::string(what) + ": shape mismatch");
}

torch::Tensor to_unit01(const ImageTensor& x) { return (x.data().to(torch::kDouble) + 1.0) / 2.0; }

torch::Tensor gaussian_window(int64_t size, double sigma) {
  auto coords = torch::arange(size, torch::kDouble) - static_cast<double>(size - 1) / 2.0;
  auto g = torch::exp(-(coords * coords) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return torch::outer(g, g);
}

}  // namespace

double psnr(const ImageTensor& a, const ImageTensor& b) {
  check_pair(a, b, "psnr");
  const double mse = (to_unit01(a) - to_unit01(b)).pow(2).mean().item<double>();
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const ImageTensor& a, const ImageTensor& b) {
  check_pair(a, b, "ssim");
  constexpr int64_t win = 11;
  if (a.height() < win || a.width() < win) throw InvalidArgument("ssim: image smaller than the 11x11 window");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto bc = a.batch() * a.channels();
  auto x = to_unit01(a).reshape({bc, 1, a.height(), a.width()});
  auto y = to_unit01(b).reshape({bc, 1, a.height(), a.width()});
  auto w = gaussian_window(win, 1.5).view({1, 1, win, win});
  auto filt = [&](const torch::Tensor& t) { return F::conv2d(t, w); };
  auto mx = filt(x), my = filt(y);
  auto sxx = filt(x * x) - mx * mx;
  auto syy = filt(y * y) - my * my;
  auto sxy = filt(x * y) - mx * my;
  auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  return map.mean().item<double>();
}

double frechet_distance(const torch::Tensor& features_a, const torch::Tensor& features_b) {
  if (features_a.dim() != 2 || features_b.dim() != 2 || features_a.size(1) != features_b.size(1)) {
    throw InvalidArgument("frechet_distance: feature matrices must share a dimension");
  }
  if (features_a.size(0) < 2 || features_b.size(0) < 2) {
    throw InvalidArgument("frechet_distance: need at least two samples per set");
  }
  auto fit = [](const torch::Tensor& f) {
    auto x = f.to(torch::kDouble);
    auto mu = x.mean(0);
    auto centered = x - mu;
    auto cov = centered.t().mm(centered) / static_cast<double>(x.size(0) - 1);
    cov = cov + 1e-6 * torch::eye(x.size(1), torch::kDouble);
    return std::make_pair(mu, cov);
  };
  auto [mu_a, cov_a] = fit(features_a);
  auto [mu_b, cov_b] = fit(features_b);
  auto [eval_a, evec_a] = torch::linalg_eigh(cov_a);
  auto sqrt_a = evec_a.mm(torch::diag(eval_a.clamp_min(0).sqrt())).mm(evec_a.t());
  auto inner = sqrt_a.mm(cov_b).mm(sqrt_a);
  inner = (inner + inner.t()) / 2.0;
  auto eval_inner = torch::linalg_eigvalsh(inner);
  const double tr_sqrt = eval_inner.clamp_min(0).sqrt().sum().item<double>();
  const double mean_term = (mu_a - mu_b).pow(2).sum().item<double>();
  const double value = mean_term + cov_a.trace().item<double>() + cov_b.trace().item<double>() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

torch::Tensor extract_features(FeatureNet& net, const torch::Tensor& images, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < images.size(0); i += batch_size) {
    const auto len = std::min(batch_size, images.size(0) - i);
    parts.push_back(net->pooled(images.narrow(0, i, len).to(torch::kFloat)).to(torch::kDouble));
  }
  return torch::cat(parts);
}

double fid_proxy(const torch::Tensor& images_a, const torch::Tensor& images_b, FeatureNet& net) {
  return frechet_distance(extract_features(net, images_a), extract_features(net, images_b));
}

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j;
  auto put = [&](const char* key, const std::optional<double>& v) { j[key] = v ? nlohmann::json(*v) : nlohmann::json(); };
  put("psnr", r.psnr);
  put("ssim", r.ssim);
  put("fid_proxy", r.fid_proxy);
  put("codebook_utilization", r.codebook_utilization);
  j["samples"] = {{"psnr", r.psnr_samples}, {"ssim", r.ssim_samples}, {"fid_proxy", r.fid_samples}};
  return j;
}

std::string render_table(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::ostringstream os;
  auto cell = [&](const std::optional<double>& v, int precision) {
    std::ostringstream c;
    if (v) {
      c << std::fixed << std::setprecision(precision) << *v;
    } else {
      c << "-";
    }
    return c.str();
  };
  os << std::left << std::setw(24) << "run" << std::right << std::setw(10) << "PSNR" << std::setw(10) << "SSIM"
     << std::setw(12) << "fid-proxy" << std::setw(12) << "codebook" << "\n";
  for (const auto& [name, r] : rows) {
    os << std::left << std::setw(24) << name << std::right << std::setw(10) << cell(r.psnr, 2) << std::setw(10)
       << cell(r.ssim, 4) << std::setw(12) << cell(r.fid_proxy, 4) << std::setw(12)
       << cell(r.codebook_utilization, 3) << "\n";
  }
  return os.str();
}

MetricReport evaluate_reconstruction(TokenizerModel& tokenizer, const Dataset& dataset, Path path,
                                     int64_t max_images, FeatureNet& net, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  tokenizer->eval();
  const auto total = std::min<int64_t>(max_images, dataset.size());
  if (total < 1) throw InvalidArgument("evaluate_reconstruction: empty dataset");
  std::vector<torch::Tensor> originals, recons;
  for (int64_t i = 0; i < total; i += batch_size) {
    auto batch = load_range(dataset, i, std::min(total, i + batch_size));
    originals.push_back(batch.images.data());
    recons.push_back(tokenizer->reconstruct(batch.images, path).data());
  }
  ImageTensor a(torch::cat(originals)), b(torch::cat(recons));
  MetricReport r;
  r.psnr = psnr(a, b);
  r.psnr_samples = a.batch();
  if (a.height() >= 11 && a.width() >= 11) {
    r.ssim = ssim(a, b);
    r.ssim_samples = a.batch();
  }
  if (a.batch() >= 2) {
    r.fid_proxy = fid_proxy(a.data(), b.data(), net);
    r.fid_samples = a.batch();
  }
  if (path == Path::discrete) {
    tokenizer->codebook()->reset_usage();
    for (int64_t i = 0; i < total; i += batch_size) {
      auto batch = load_range(dataset, i, std::min(total, i + batch_size));
      tokenizer->tokenize(batch.images, true);
    }
    r.codebook_utilization = tokenizer->codebook()->usage_report().utilization;
  }
  return r;
}

double median(std::vector<double> values) {
  if (values.empty()) throw InvalidArgument("median of an empty sample");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

ProfileReport profile(const Pipeline& run, int64_t warmup_runs, int64_t timed_runs, int64_t latency_batch,
                      int64_t throughput_batch) {
  if (warmup_runs < 2 || timed_runs < 5) throw ConfigError("profiling needs >= 2 warmup and >= 5 timed runs");
  ProfileReport r;
  r.latency_batch = latency_batch;
  r.throughput_batch = throughput_batch;
  r.warmup_runs = warmup_runs;
  r.timed_runs = timed_runs;
  auto time_once = [&](int64_t batch) {
    const auto start = std::chrono::steady_clock::now();
    run(batch);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  try {
    for (int64_t i = 0; i < warmup_runs; ++i) time_once(latency_batch);
    for (int64_t i = 0; i < timed_runs; ++i) r.latency_samples.push_back(time_once(latency_batch));
    r.latency_s = median(r.latency_samples);
    for (int64_t i = 0; i < warmup_runs; ++i) time_once(throughput_batch);
    for (int64_t i = 0; i < timed_runs; ++i) {
      r.throughput_samples.push_back(static_cast<double>(throughput_batch) / time_once(throughput_batch));
    }
    r.throughput_ips = median(r.throughput_samples);
    r.complete = true;
  } catch (const std::exception& e) {
    r.error = e.what();
    throw ProfileFailure(std::string("pipeline failed during profiling: ") + e.what(), r);
  }
  return r;
}

nlohmann::json to_json(const ProfileReport& r) {
  return {{"latency_s", r.latency_s},
          {"throughput_ips", r.throughput_ips},
          {"latency_batch", r.latency_batch},
          {"throughput_batch", r.throughput_batch},
          {"warmup_runs", r.warmup_runs},
          {"timed_runs", r.timed_runs},
          {"latency_samples", r.latency_samples},
          {"throughput_samples", r.throughput_samples},
          {"complete", r.complete},
          {"note", r.note},
          {"error", r.error}};
}

std::string render_table(const ProfileReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "metric" << std::right << std::setw(14) << "value" << std::setw(8) << "batch"
     << "\n";
  os << std::left << std::setw(16) << "latency (s)" << std::right << std::setw(14) << std::fixed
     << std::setprecision(5) << r.latency_s << std::setw(8) << r.latency_batch << "\n";
  os << std::left << std::setw(16) << "throughput (im/s)" << std::right << std::setw(13) << std::setprecision(2)
     << r.throughput_ips << std::setw(8) << r.throughput_batch << "\n";
  os << "warmup " << r.warmup_runs << ", timed " << r.timed_runs << " (medians); " << r.note << "\n";
  if (!r.error.empty()) os << "error: " << r.error << "\n";
  return os.str();
}

}  // namespace dcar
