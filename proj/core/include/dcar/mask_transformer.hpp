#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <vector>

#include <torch/torch.h>

#include "dcar/latent.hpp"
#include "dcar/rng.hpp"

namespace dcar {

struct GeneratorConfig {
  int64_t layers = 6;
  int64_t width = 256;
  int64_t heads = 8;
  int64_t mlp_ratio = 4;
  int64_t vocab = 512;            // codebook size N
  int64_t condition_dim = 256;
  int64_t num_classes = 12;       // class-label condition table; 0 disables it
  int64_t max_grid_h = 8;         // positional table extent
  int64_t max_grid_w = 8;
  double attention_dropout = 0.1;
  double condition_dropout = 0.1;
  uint64_t seed = 0;

  void validate() const;
};

// mask: bool (batch, h, w), true = masked. committed: int64 (batch, h, w);
// values at masked positions are ignored.
struct MaskState {
  torch::Tensor mask;
  torch::Tensor committed;

  int64_t batch() const { return mask.size(0); }
  int64_t tokens_per_sample() const { return mask.size(1) * mask.size(2); }
  std::vector<int64_t> masked_counts() const;
};

// batch x L x condition_dim
struct ConditionEmbedding {
  torch::Tensor sequence;

  int64_t batch() const { return sequence.size(0); }
  int64_t length() const { return sequence.size(1); }
};

class AttentionImpl : public torch::nn::Module {
 public:
  AttentionImpl(int64_t width, int64_t heads, double dropout);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

 private:
  int64_t heads_;
  double dropout_;
  torch::nn::Linear q_{nullptr}, k_{nullptr}, v_{nullptr}, out_{nullptr};
};
TORCH_MODULE(Attention);

class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int64_t width, int64_t heads, int64_t mlp_ratio, double dropout);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

 private:
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr}, norm3_{nullptr};
  Attention self_attn_{nullptr}, cross_attn_{nullptr};
  torch::nn::Sequential mlp_{nullptr};
};
TORCH_MODULE(TransformerBlock);

struct TransformerOutput {
  torch::Tensor logits;  // batch x h*w x vocab
  torch::Tensor hidden;  // batch x h*w x width
};

// Bidirectional transformer over discrete tokens. Masked positions use a
// learned mask embedding; conditions enter only through cross-attention.
class MaskTransformerImpl : public torch::nn::Module {
 public:
  explicit MaskTransformerImpl(GeneratorConfig cfg);

  TransformerOutput forward(const TokenIndexGrid& tokens, const MaskState& state, const ConditionEmbedding& cond);
  TransformerOutput forward(const MaskState& state, const ConditionEmbedding& cond);

  ConditionEmbedding embed_classes(const std::vector<int64_t>& labels) const;
  ConditionEmbedding null_condition(int64_t batch, int64_t length = 1) const;

  // Positional embeddings for an h x w grid: centre crop of the table, or a
  // bilinear resize when the grid exceeds it.
  torch::Tensor positional(int64_t h, int64_t w) const;
  // Permanently resizes the positional table (fine-tuning at a larger grid).
  void expand_positional(int64_t h, int64_t w);

  const GeneratorConfig& config() const { return cfg_; }
  int64_t parameter_count() const;

 private:
  GeneratorConfig cfg_;
  torch::nn::Embedding token_embed_{nullptr};
  torch::Tensor mask_embed_;
  torch::Tensor pos_;
  torch::Tensor null_cond_;
  torch::nn::Embedding class_embed_{nullptr};
  torch::nn::Linear cond_proj_{nullptr};
  std::vector<TransformerBlock> blocks_;
  torch::nn::LayerNorm final_norm_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(MaskTransformer);

// Masks ceil(n * cos(pi * u / 2)) positions (at least one) chosen uniformly
// without replacement, u ~ U(0, 1]. Returns a bool vector of length n.
torch::Tensor sample_train_mask(int64_t n_tokens, Rng& rng);
MaskState sample_train_masks(const TokenIndexGrid& tokens, Rng& rng);

// Mean cross-entropy over masked positions only.
torch::Tensor masked_ce_loss(const torch::Tensor& logits, const TokenIndexGrid& target, const MaskState& mask);

struct DroppedCondition {
  ConditionEmbedding cond;
  std::vector<bool> dropped;
};

// Replaces each sample's sequence with the null condition with probability p.
DroppedCondition condition_dropout(const ConditionEmbedding& cond, const ConditionEmbedding& null_cond, double p,
                                   Rng& rng);

// Conditioning sources.
class ConditionProvider {
 public:
  virtual ~ConditionProvider() = default;
  virtual ConditionEmbedding embed(const std::vector<int64_t>& ids) const = 0;
};

class ClassLabelProvider : public ConditionProvider {
 public:
  explicit ClassLabelProvider(MaskTransformer generator) : generator_(std::move(generator)) {}
  ConditionEmbedding embed(const std::vector<int64_t>& ids) const override;

 private:
  MaskTransformer generator_;
};

// Condition-embedding file: a sequence of little-endian records
//   int64 id | int32 L | int32 condition_dim | L * condition_dim float32
struct EmbeddingRecord {
  int64_t id = 0;
  torch::Tensor values;  // L x condition_dim
};

void write_embedding_file(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& records);
std::vector<EmbeddingRecord> read_embedding_file(const std::filesystem::path& path);

class EmbeddingFileProvider : public ConditionProvider {
 public:
  explicit EmbeddingFileProvider(const std::filesystem::path& path);
  explicit EmbeddingFileProvider(const std::vector<EmbeddingRecord>& records);
  ConditionEmbedding embed(const std::vector<int64_t>& ids) const override;
  int64_t condition_dim() const { return dim_; }

 private:
  std::map<int64_t, torch::Tensor> table_;
  int64_t dim_ = 0;
};

// AdamW with a cosine learning-rate decay from base_lr to zero.
double cosine_learning_rate(double base_lr, int64_t step, int64_t total_steps);

}  // namespace dcar
