#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dcar/diffusion_head.hpp"
#include "dcar/latent.hpp"
#include "dcar/rng.hpp"
#include "dcar/tokenizer.hpp"

namespace dcar {

enum class Split { train, val };
enum class ConditionMode { class_label, embedding_file, none };
enum class DataSource { shapes, image_folder };

const char* to_string(Split s);
const char* to_string(ConditionMode m);
const char* to_string(DataSource s);
Split split_from_string(const std::string& s);
ConditionMode condition_mode_from_string(const std::string& s);
DataSource data_source_from_string(const std::string& s);

struct DatasetSpec {
  DataSource source = DataSource::shapes;
  std::string root;             // image folder root: root/split/class_name/*.png|jpg
  int64_t resolution = 32;
  Split split = Split::train;
  ConditionMode condition_mode = ConditionMode::class_label;
  std::string embedding_file;   // for ConditionMode::embedding_file
  int64_t size = 4096;          // procedural corpus size
  uint64_t seed = 0;            // procedural corpus seed
};

struct Sample {
  torch::Tensor image;  // C x H x W in [-1, 1]
  int64_t label = 0;
  int64_t id = 0;       // stable per-split index
};

class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual int64_t size() const = 0;
  virtual int64_t resolution() const = 0;
  virtual int64_t num_classes() const = 0;
  // nullopt when the underlying file cannot be decoded
  virtual std::optional<Sample> try_get(int64_t index) const = 0;
  // Identity used to check split disjointness (path or procedural key).
  virtual std::string identity(int64_t index) const = 0;
};

// Procedural shapes-and-colors corpus. Class = shape * 4 + colour for
// shapes {circle, square, triangle} and colours {red, green, blue, yellow}.
// Scenes are defined in continuous coordinates, so the same index renders
// the same scene at any resolution.
class ShapesDataset : public Dataset {
 public:
  static constexpr int64_t kShapes = 3;
  static constexpr int64_t kColors = 4;

  ShapesDataset(int64_t resolution, int64_t size, Split split, uint64_t seed = 0);

  int64_t size() const override { return size_; }
  int64_t resolution() const override { return resolution_; }
  int64_t num_classes() const override { return kShapes * kColors; }
  std::optional<Sample> try_get(int64_t index) const override;
  std::string identity(int64_t index) const override;

 private:
  int64_t resolution_;
  int64_t size_;
  Split split_;
  uint64_t seed_;
};

class ImageFolderDataset : public Dataset {
 public:
  ImageFolderDataset(const std::filesystem::path& root, Split split, int64_t resolution);

  int64_t size() const override { return static_cast<int64_t>(files_.size()); }
  int64_t resolution() const override { return resolution_; }
  int64_t num_classes() const override { return static_cast<int64_t>(classes_.size()); }
  std::optional<Sample> try_get(int64_t index) const override;
  std::string identity(int64_t index) const override;
  const std::vector<std::string>& classes() const { return classes_; }

 private:
  int64_t resolution_;
  std::vector<std::string> classes_;
  std::vector<std::pair<std::filesystem::path, int64_t>> files_;
};

std::shared_ptr<const Dataset> make_dataset(const DatasetSpec& spec);

// Throws if any identity or file content appears in both datasets.
void verify_disjoint(const Dataset& a, const Dataset& b);

struct Batch {
  ImageTensor images;
  std::vector<int64_t> labels;
  std::vector<int64_t> ids;
};

// Random batch without replacement. Undecodable files are skipped with a
// warning and replaced by further draws.
Batch load_batch(const Dataset& dataset, int64_t batch_size, Rng& rng);

// Fixed contiguous range, in index order (evaluation).
Batch load_range(const Dataset& dataset, int64_t begin, int64_t end);

// Epoch iterator. The permutation of epoch e depends only on (seed, e).
class DataLoader {
 public:
  DataLoader(std::shared_ptr<const Dataset> dataset, int64_t batch_size, uint64_t seed, bool shuffle = true);

  void start_epoch(int64_t epoch);
  std::optional<Batch> next();
  int64_t batches_per_epoch() const;
  const Dataset& dataset() const { return *dataset_; }

 private:
  std::shared_ptr<const Dataset> dataset_;
  int64_t batch_size_;
  uint64_t seed_;
  bool shuffle_;
  std::vector<int64_t> order_;
  size_t cursor_ = 0;
};

// Image helpers.
torch::Tensor bytes_to_unit(const torch::Tensor& hwc_u8);          // HWC uint8 -> CHW [-1, 1]
torch::Tensor unit_to_bytes(const torch::Tensor& chw);             // CHW [-1, 1] -> HWC uint8
torch::Tensor center_crop_square(const torch::Tensor& chw);
torch::Tensor resize_image(const torch::Tensor& chw, int64_t resolution);  // bilinear, antialiased
torch::Tensor preprocess(const torch::Tensor& hwc_u8, int64_t resolution);
std::optional<torch::Tensor> read_image_file(const std::filesystem::path& path);  // HWC uint8 RGB
void write_image_file(const torch::Tensor& chw, const std::filesystem::path& path);

// Per-channel mean/std of Z - Z_q over `sample_tokens` tokens drawn in a
// seed-determined order. Throws InvalidArgument naming a zero-variance channel.
ResidualStats compute_residual_stats(const Dataset& dataset, TokenizerModel& tokenizer,
                                     int64_t sample_tokens = 10000, uint64_t seed = 0,
                                     int64_t batch_size = 64);

}  // namespace dcar
