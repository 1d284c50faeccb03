#include "dcar/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <set>
#include <unordered_map>

#include <opencv2/imgcodecs.hpp>
#include "dcar/log.hpp"

#include "dcar/errors.hpp"

namespace dcar {
namespace fs = std::filesystem;
namespace F = torch::nn::functional;

const char* to_string(Split s) { return s == Split::train ? "train" : "val"; }

const char* to_string(ConditionMode m) {
  switch (m) {
    case ConditionMode::class_label: return "class_label";
    case ConditionMode::embedding_file: return "embedding_file";
    case ConditionMode::none: return "none";
  }
  return "none";
}

const char* to_string(DataSource s) { return s == DataSource::shapes ? "shapes" : "image_folder"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  throw ConfigError("unknown split '" + s + "'");
}

ConditionMode condition_mode_from_string(const std::string& s) {
  if (s == "class_label") return ConditionMode::class_label;
  if (s == "embedding_file") return ConditionMode::embedding_file;
  if (s == "none") return ConditionMode::none;
  throw ConfigError("unknown condition mode '" + s + "'");
}

DataSource data_source_from_string(const std::string& s) {
  if (s == "shapes") return DataSource::shapes;
  if (s == "image_folder") return DataSource::image_folder;
  throw ConfigError("unknown data source '" + s + "'");
}

// ---------------------------------------------------------------------------
// Procedural corpus

namespace {

struct Scene {
  int64_t shape;
  int64_t color;
  std::array<double, 3> fill;
  std::array<double, 3> background;
  double grad_angle, grad_amp;
  double cx, cy, size, rotation;
  double shade_angle, shade_amp;
};

constexpr std::array<std::array<double, 3>, 4> kPalette{{
    {0.86, 0.16, 0.14},  // red
    {0.18, 0.74, 0.26},  // green
    {0.18, 0.30, 0.90},  // blue
    {0.92, 0.84, 0.18},  // yellow
}};

Scene make_scene(uint64_t seed, Split split, int64_t index) {
  const uint64_t salt = split == Split::train ? 0x7261696eULL : 0x76616c00ULL;
  Rng rng(mix_seed(seed ^ salt, static_cast<uint64_t>(index)));
  Scene s{};
  s.shape = rng.randint(ShapesDataset::kShapes);
  s.color = rng.randint(ShapesDataset::kColors);
  for (size_t c = 0; c < 3; ++c) {
    s.fill[c] = std::clamp(kPalette[static_cast<size_t>(s.color)][c] + (rng.uniform() - 0.5) * 0.16, 0.0, 1.0);
  }
  const double base = 0.12 + 0.33 * rng.uniform();
  for (size_t c = 0; c < 3; ++c) s.background[c] = base + (rng.uniform() - 0.5) * 0.10;
  s.grad_angle = 2.0 * std::numbers::pi * rng.uniform();
  s.grad_amp = 0.05 + 0.20 * rng.uniform();
  s.cx = 0.3 + 0.4 * rng.uniform();
  s.cy = 0.3 + 0.4 * rng.uniform();
  s.size = 0.17 + 0.13 * rng.uniform();
  s.rotation = 2.0 * std::numbers::pi * rng.uniform();
  s.shade_angle = 2.0 * std::numbers::pi * rng.uniform();
  s.shade_amp = 0.25 * rng.uniform();
  return s;
}

bool inside(const Scene& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  const double cr = std::cos(s.rotation), sr = std::sin(s.rotation);
  const double u = cr * dx + sr * dy, v = -sr * dx + cr * dy;
  switch (s.shape) {
    case 0: return dx * dx + dy * dy <= s.size * s.size;
    case 1: return std::abs(u) <= 0.85 * s.size && std::abs(v) <= 0.85 * s.size;
    default: {
      // equilateral triangle with circumradius 1.15 * size, apex along +v
      const double r = 1.15 * s.size;
      for (int k = 0; k < 3; ++k) {
        const double a = std::numbers::pi / 2.0 + 2.0 * std::numbers::pi * k / 3.0 + std::numbers::pi / 3.0;
        // edge normal direction; the edge lies at distance r/2 from the centre
        if (u * std::cos(a) + v * std::sin(a) > r / 2.0) return false;
      }
      return true;
    }
  }
}

torch::Tensor render(const Scene& s, int64_t res) {
  constexpr int kSub = 4;
  auto img = torch::empty({3, res, res}, torch::kFloat);
  auto acc = img.accessor<float, 3>();
  const double gx = std::cos(s.grad_angle), gy = std::sin(s.grad_angle);
  const double hx = std::cos(s.shade_angle), hy = std::sin(s.shade_angle);
  for (int64_t py = 0; py < res; ++py) {
    for (int64_t px = 0; px < res; ++px) {
      std::array<double, 3> sum{0, 0, 0};
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double x = (static_cast<double>(px) + (sx + 0.5) / kSub) / static_cast<double>(res);
          const double y = (static_cast<double>(py) + (sy + 0.5) / kSub) / static_cast<double>(res);
          if (inside(s, x, y)) {
            const double shade = 1.0 + s.shade_amp * ((x - s.cx) * hx + (y - s.cy) * hy) / s.size;
            for (size_t c = 0; c < 3; ++c) sum[c] += s.fill[c] * shade;
          } else {
            const double g = s.grad_amp * ((x - 0.5) * gx + (y - 0.5) * gy);
            for (size_t c = 0; c < 3; ++c) sum[c] += s.background[c] + g;
          }
        }
      }
      for (size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(sum[c] / (kSub * kSub), 0.0, 1.0);
        acc[static_cast<int64_t>(c)][py][px] = static_cast<float>(2.0 * v - 1.0);
      }
    }
  }
  return img;
}

}  // namespace

ShapesDataset::ShapesDataset(int64_t resolution, int64_t size, Split split, uint64_t seed)
    : resolution_(resolution), size_(size), split_(split), seed_(seed) {
  if (resolution < 1 || size < 0) throw InvalidArgument("invalid shapes dataset geometry");
}

std::optional<Sample> ShapesDataset::try_get(int64_t index) const {
  if (index < 0 || index >= size_) throw InvalidArgument("dataset index out of range");
  auto scene = make_scene(seed_, split_, index);
  return Sample{render(scene, resolution_), scene.shape * kColors + scene.color, index};
}

std::string ShapesDataset::identity(int64_t index) const {
  return "shapes/" + std::to_string(seed_) + "/" + to_string(split_) + "/" + std::to_string(index);
}

// ---------------------------------------------------------------------------
// Image folders

ImageFolderDataset::ImageFolderDataset(const fs::path& root, Split split, int64_t resolution)
    : resolution_(resolution) {
  const auto dir = root / to_string(split);
  if (!fs::is_directory(dir)) throw ConfigError("dataset directory not found: " + dir.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) classes_.push_back(entry.path().filename().string());
  }
  std::sort(classes_.begin(), classes_.end());
  for (size_t c = 0; c < classes_.size(); ++c) {
    std::vector<fs::path> paths;
    for (const auto& entry : fs::directory_iterator(dir / classes_[c])) {
      auto ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (entry.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) {
        paths.push_back(entry.path());
      }
    }
    std::sort(paths.begin(), paths.end());
    for (auto& p : paths) files_.emplace_back(std::move(p), static_cast<int64_t>(c));
  }
  if (files_.empty()) throw ConfigError("dataset is empty: " + dir.string());
}

std::optional<Sample> ImageFolderDataset::try_get(int64_t index) const {
  if (index < 0 || index >= size()) throw InvalidArgument("dataset index out of range");
  const auto& [path, label] = files_[static_cast<size_t>(index)];
  auto raw = read_image_file(path);
  if (!raw) {
    log::warn("skipping undecodable image " + path.string());
    return std::nullopt;
  }
  return Sample{preprocess(*raw, resolution_), label, index};
}

std::string ImageFolderDataset::identity(int64_t index) const {
  const auto& p = files_[static_cast<size_t>(index)].first;
  std::error_code ec;
  auto canon = fs::weakly_canonical(p, ec);
  return ec ? p.string() : canon.string();
}

std::shared_ptr<const Dataset> make_dataset(const DatasetSpec& spec) {
  if (spec.source == DataSource::shapes) {
    return std::make_shared<ShapesDataset>(spec.resolution, spec.size, spec.split, spec.seed);
  }
  return std::make_shared<ImageFolderDataset>(spec.root, spec.split, spec.resolution);
}

namespace {

std::string content_key(const Dataset& ds, int64_t i) {
  auto id = ds.identity(i);
  std::ifstream in(id, std::ios::binary);
  if (!in) return {};
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return std::to_string(bytes.size()) + ":" + std::to_string(std::hash<std::string>{}(bytes));
}

}  // namespace

void verify_disjoint(const Dataset& a, const Dataset& b) {
  std::set<std::string> ids, contents;
  for (int64_t i = 0; i < a.size(); ++i) {
    ids.insert(a.identity(i));
    if (auto k = content_key(a, i); !k.empty()) contents.insert(k);
  }
  for (int64_t i = 0; i < b.size(); ++i) {
    if (ids.count(b.identity(i))) throw ConfigError("splits overlap: " + b.identity(i));
    if (auto k = content_key(b, i); !k.empty() && contents.count(k)) {
      throw ConfigError("splits share identical file content: " + b.identity(i));
    }
  }
}

// ---------------------------------------------------------------------------
// Batching

namespace {

Batch assemble(const Dataset& ds, const std::vector<int64_t>& indices, size_t want, size_t& cursor) {
  std::vector<torch::Tensor> images;
  Batch batch;
  while (images.size() < want && cursor < indices.size()) {
    auto sample = ds.try_get(indices[cursor++]);
    if (!sample) continue;
    images.push_back(sample->image);
    batch.labels.push_back(sample->label);
    batch.ids.push_back(sample->id);
  }
  if (images.empty()) throw InvalidArgument("no decodable images available for batch");
  batch.images = ImageTensor(torch::stack(images));
  return batch;
}

}  // namespace

Batch load_batch(const Dataset& dataset, int64_t batch_size, Rng& rng) {
  if (dataset.size() == 0) throw InvalidArgument("dataset is empty");
  auto order = rng.permutation(dataset.size());
  size_t cursor = 0;
  return assemble(dataset, order, static_cast<size_t>(std::min(batch_size, dataset.size())), cursor);
}

Batch load_range(const Dataset& dataset, int64_t begin, int64_t end) {
  end = std::min(end, dataset.size());
  if (begin >= end) throw InvalidArgument("empty batch range");
  std::vector<int64_t> idx;
  for (int64_t i = begin; i < end; ++i) idx.push_back(i);
  size_t cursor = 0;
  return assemble(dataset, idx, idx.size(), cursor);
}

DataLoader::DataLoader(std::shared_ptr<const Dataset> dataset, int64_t batch_size, uint64_t seed, bool shuffle)
    : dataset_(std::move(dataset)), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (!dataset_ || dataset_->size() == 0) throw InvalidArgument("dataset is empty");
  if (batch_size_ < 1) throw InvalidArgument("batch size must be positive");
  start_epoch(0);
}

void DataLoader::start_epoch(int64_t epoch) {
  if (shuffle_) {
    Rng rng(mix_seed(seed_, static_cast<uint64_t>(epoch)));
    order_ = rng.permutation(dataset_->size());
  } else {
    order_.resize(static_cast<size_t>(dataset_->size()));
    std::iota(order_.begin(), order_.end(), 0);
  }
  cursor_ = 0;
}

std::optional<Batch> DataLoader::next() {
  // Drop the trailing partial batch so every step sees the same batch size.
  if (cursor_ + static_cast<size_t>(batch_size_) > order_.size()) {
    if (cursor_ == 0 && !order_.empty()) return assemble(*dataset_, order_, order_.size(), cursor_);
    return std::nullopt;
  }
  return assemble(*dataset_, order_, static_cast<size_t>(batch_size_), cursor_);
}

int64_t DataLoader::batches_per_epoch() const {
  return std::max<int64_t>(1, dataset_->size() / batch_size_);
}

// ---------------------------------------------------------------------------
// Image helpers

torch::Tensor bytes_to_unit(const torch::Tensor& hwc_u8) {
  return hwc_u8.permute({2, 0, 1}).to(torch::kFloat).div(127.5).sub(1.0).contiguous();
}

torch::Tensor unit_to_bytes(const torch::Tensor& chw) {
  return chw.detach().to(torch::kFloat).clamp(-1.0, 1.0).add(1.0).mul(127.5).round().to(torch::kUInt8)
      .permute({1, 2, 0}).contiguous();
}

torch::Tensor center_crop_square(const torch::Tensor& chw) {
  const auto h = chw.size(1), w = chw.size(2);
  const auto side = std::min(h, w);
  const auto top = (h - side) / 2, left = (w - side) / 2;
  return chw.narrow(1, top, side).narrow(2, left, side);
}

torch::Tensor resize_image(const torch::Tensor& chw, int64_t resolution) {
  if (chw.size(1) == resolution && chw.size(2) == resolution) return chw.contiguous();
  auto out = F::interpolate(chw.unsqueeze(0).to(torch::kFloat),
                            F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{resolution, resolution})
                                .mode(torch::kBilinear)
                                .align_corners(false)
                                .antialias(true));
  return out.squeeze(0).clamp(-1.0, 1.0);
}

torch::Tensor preprocess(const torch::Tensor& hwc_u8, int64_t resolution) {
  return resize_image(center_crop_square(bytes_to_unit(hwc_u8)), resolution);
}

std::optional<torch::Tensor> read_image_file(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) return std::nullopt;
  auto t = torch::from_blob(bgr.data, {bgr.rows, bgr.cols, 3}, torch::kUInt8).clone();
  return t.flip({2}).contiguous();  // BGR -> RGB
}

void write_image_file(const torch::Tensor& chw, const fs::path& path) {
  auto rgb = unit_to_bytes(chw).flip({2}).contiguous();
  cv::Mat bgr(static_cast<int>(rgb.size(0)), static_cast<int>(rgb.size(1)), CV_8UC3, rgb.data_ptr());
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw std::runtime_error("failed to write image " + path.string());
}

// ---------------------------------------------------------------------------
// Residual statistics

ResidualStats compute_residual_stats(const Dataset& dataset, TokenizerModel& tokenizer, int64_t sample_tokens,
                                     uint64_t seed, int64_t batch_size) {
  if (dataset.size() == 0) throw InvalidArgument("dataset is empty");
  torch::NoGradGuard no_grad;
  const bool was_training = tokenizer->is_training();
  tokenizer->eval();
  Rng rng(seed);
  auto order = rng.permutation(dataset.size());
  std::vector<torch::Tensor> rows;
  int64_t collected = 0;
  size_t cursor = 0;
  while (collected < sample_tokens && cursor < order.size()) {
    auto batch = assemble(dataset, order, static_cast<size_t>(batch_size), cursor);
    auto z = tokenizer->encode(batch.images);
    auto [tokens, zq] = tokenizer->codebook()->quantize(z, false);
    auto r = to_token_rows(decompose(z, zq).data());
    rows.push_back(r);
    collected += r.size(0);
  }
  if (was_training) tokenizer->train();
  auto all = torch::cat(rows, 0).narrow(0, 0, std::min(collected, sample_tokens));
  ResidualStats stats{all.mean(0).to(torch::kFloat), all.std(0, false).to(torch::kFloat)};
  auto acc = stats.std.accessor<float, 1>();
  for (int64_t c = 0; c < stats.std.size(0); ++c) {
    if (!(acc[c] > 1e-6f)) {
      throw InvalidArgument("residual channel " + std::to_string(c) + " has zero variance");
    }
  }
  return stats;
}

}  // namespace dcar
