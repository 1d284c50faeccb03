#include "dcar/mask_transformer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "dcar/binary_io.hpp"
#include "dcar/errors.hpp"

namespace dcar {
namespace F = torch::nn::functional;

void GeneratorConfig::validate() const {
  if (layers < 1 || width < 1 || heads < 1) throw ConfigError("generator needs positive layers, width and heads");
  if (width % heads != 0) throw ConfigError("generator width must be divisible by heads");
  if (vocab < 2) throw ConfigError("generator vocabulary must have at least two entries");
  if (condition_dim < 1) throw ConfigError("condition_dim must be positive");
  if (max_grid_h < 1 || max_grid_w < 1) throw ConfigError("positional table must be non-empty");
  if (attention_dropout < 0 || attention_dropout >= 1 || condition_dropout < 0 || condition_dropout > 1) {
    throw ConfigError("dropout probabilities out of range");
  }
}

std::vector<int64_t> MaskState::masked_counts() const {
  auto counts = mask.reshape({mask.size(0), -1}).sum(1).to(torch::kLong);
  return std::vector<int64_t>(counts.data_ptr<int64_t>(), counts.data_ptr<int64_t>() + counts.numel());
}

AttentionImpl::AttentionImpl(int64_t width, int64_t heads, double dropout) : heads_(heads), dropout_(dropout) {
  q_ = register_module("q", torch::nn::Linear(width, width));
  k_ = register_module("k", torch::nn::Linear(width, width));
  v_ = register_module("v", torch::nn::Linear(width, width));
  out_ = register_module("out", torch::nn::Linear(width, width));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  const auto b = x.size(0), n = x.size(1), w = x.size(2), m = context.size(1);
  const auto dh = w / heads_;
  auto q = q_(x).view({b, n, heads_, dh}).transpose(1, 2);
  auto k = k_(context).view({b, m, heads_, dh}).transpose(1, 2);
  auto v = v_(context).view({b, m, heads_, dh}).transpose(1, 2);
  auto attn = at::scaled_dot_product_attention(q, k, v, {}, is_training() ? dropout_ : 0.0, false);
  return out_(attn.transpose(1, 2).reshape({b, n, w}));
}

TransformerBlockImpl::TransformerBlockImpl(int64_t width, int64_t heads, int64_t mlp_ratio, double dropout) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  self_attn_ = register_module("self_attn", Attention(width, heads, dropout));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  cross_attn_ = register_module("cross_attn", Attention(width, heads, dropout));
  norm3_ = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  mlp_ = register_module("mlp", torch::nn::Sequential(torch::nn::Linear(width, mlp_ratio * width),
                                                      torch::nn::GELU(),
                                                      torch::nn::Linear(mlp_ratio * width, width)));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  auto h = norm1_(x);
  auto y = x + self_attn_(h, h);
  y = y + cross_attn_(norm2_(y), context);
  return y + mlp_->forward(norm3_(y));
}

MaskTransformerImpl::MaskTransformerImpl(GeneratorConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  torch::manual_seed(cfg_.seed);
  const auto w = cfg_.width;
  token_embed_ = register_module("token_embed", torch::nn::Embedding(cfg_.vocab, w));
  torch::nn::init::normal_(token_embed_->weight, 0.0, 0.02);
  mask_embed_ = register_parameter("mask_embed", torch::randn({w}) * 0.02);
  pos_ = register_parameter("pos", torch::randn({cfg_.max_grid_h, cfg_.max_grid_w, w}) * 0.02);
  null_cond_ = register_parameter("null_condition", torch::randn({1, 1, cfg_.condition_dim}) * 0.02);
  if (cfg_.num_classes > 0) {
    class_embed_ = register_module("class_embed", torch::nn::Embedding(cfg_.num_classes, cfg_.condition_dim));
    torch::nn::init::normal_(class_embed_->weight, 0.0, 0.02);
  }
  cond_proj_ = register_module("cond_proj", torch::nn::Linear(cfg_.condition_dim, w));
  for (int64_t i = 0; i < cfg_.layers; ++i) {
    blocks_.push_back(register_module("block" + std::to_string(i),
                                      TransformerBlock(w, cfg_.heads, cfg_.mlp_ratio, cfg_.attention_dropout)));
  }
  final_norm_ = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({w})));
  head_ = register_module("head", torch::nn::Linear(w, cfg_.vocab));
}

torch::Tensor MaskTransformerImpl::positional(int64_t h, int64_t w) const {
  const auto mh = pos_.size(0), mw = pos_.size(1);
  if (h <= mh && w <= mw) {
    return pos_.narrow(0, (mh - h) / 2, h).narrow(1, (mw - w) / 2, w);
  }
  auto grid = pos_.permute({2, 0, 1}).unsqueeze(0);
  auto resized = F::interpolate(grid, F::InterpolateFuncOptions()
                                          .size(std::vector<int64_t>{h, w})
                                          .mode(torch::kBilinear)
                                          .align_corners(false));
  return resized.squeeze(0).permute({1, 2, 0});
}

void MaskTransformerImpl::expand_positional(int64_t h, int64_t w) {
  torch::NoGradGuard no_grad;
  auto resized = positional(h, w).contiguous().clone();
  pos_.set_data(resized);
  cfg_.max_grid_h = h;
  cfg_.max_grid_w = w;
}

TransformerOutput MaskTransformerImpl::forward(const TokenIndexGrid& tokens, const MaskState& state,
                                               const ConditionEmbedding& cond) {
  const auto b = tokens.batch(), h = tokens.height(), w = tokens.width();
  if (!state.mask.defined() || !state.mask.sizes().equals(tokens.indices().sizes())) {
    throw InvalidArgument("mask shape does not match the token grid");
  }
  if (cond.sequence.dim() != 3 || cond.batch() != b || cond.sequence.size(2) != cfg_.condition_dim) {
    throw InvalidArgument("condition embedding must be batch x L x condition_dim");
  }
  auto mask = state.mask.to(torch::kBool);
  auto idx = tokens.indices().masked_fill(mask, 0);
  if (idx.numel() > 0 && (idx.min().item<int64_t>() < 0 || idx.max().item<int64_t>() >= cfg_.vocab)) {
    throw InvalidArgument("token index outside [0, vocab)");
  }
  auto x = token_embed_(idx.reshape({b, h * w}));
  auto m = mask.reshape({b, h * w, 1});
  x = torch::where(m, mask_embed_.view({1, 1, -1}).expand_as(x), x);
  x = x + positional(h, w).reshape({1, h * w, cfg_.width});
  auto context = cond_proj_(cond.sequence.to(torch::kFloat));
  for (auto& block : blocks_) x = block(x, context);
  auto hidden = final_norm_(x);
  return {head_(hidden), hidden};
}

TransformerOutput MaskTransformerImpl::forward(const MaskState& state, const ConditionEmbedding& cond) {
  return forward(TokenIndexGrid(state.committed), state, cond);
}

ConditionEmbedding MaskTransformerImpl::embed_classes(const std::vector<int64_t>& labels) const {
  if (!class_embed_) throw ConfigError("generator has no class-label table");
  for (auto l : labels) {
    if (l < 0 || l >= cfg_.num_classes) throw InvalidArgument("class label " + std::to_string(l) + " out of range");
  }
  auto idx = torch::tensor(labels, torch::kLong);
  return {class_embed_->weight.index_select(0, idx).unsqueeze(1)};
}

ConditionEmbedding MaskTransformerImpl::null_condition(int64_t batch, int64_t length) const {
  return {null_cond_.expand({batch, length, cfg_.condition_dim})};
}

int64_t MaskTransformerImpl::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

torch::Tensor sample_train_mask(int64_t n_tokens, Rng& rng) {
  if (n_tokens < 1) throw InvalidArgument("sample_train_mask: n_tokens must be >= 1");
  const double u = rng.uniform_open_closed();
  const double frac = std::cos(std::numbers::pi * u / 2.0);
  auto count = static_cast<int64_t>(std::ceil(static_cast<double>(n_tokens) * frac));
  count = std::clamp<int64_t>(count, 1, n_tokens);
  auto order = rng.permutation(n_tokens);
  auto mask = torch::zeros({n_tokens}, torch::kBool);
  auto acc = mask.accessor<bool, 1>();
  for (int64_t i = 0; i < count; ++i) acc[order[static_cast<size_t>(i)]] = true;
  return mask;
}

MaskState sample_train_masks(const TokenIndexGrid& tokens, Rng& rng) {
  const auto b = tokens.batch(), h = tokens.height(), w = tokens.width();
  std::vector<torch::Tensor> masks;
  for (int64_t i = 0; i < b; ++i) masks.push_back(sample_train_mask(h * w, rng).reshape({h, w}));
  return {torch::stack(masks), tokens.indices()};
}

torch::Tensor masked_ce_loss(const torch::Tensor& logits, const TokenIndexGrid& target, const MaskState& mask) {
  const auto vocab = logits.size(-1);
  auto flat_mask = mask.mask.reshape({-1}).to(torch::kBool);
  if (flat_mask.numel() != target.indices().numel() || logits.numel() / vocab != flat_mask.numel()) {
    throw InvalidArgument("masked_ce_loss: logits, targets and mask disagree in size");
  }
  auto sel = flat_mask.nonzero().reshape({-1});
  if (sel.numel() == 0) throw InvalidArgument("masked_ce_loss: no masked positions");
  auto picked = logits.reshape({-1, vocab}).index_select(0, sel);
  auto labels = target.indices().reshape({-1}).index_select(0, sel);
  return F::cross_entropy(picked, labels);
}

DroppedCondition condition_dropout(const ConditionEmbedding& cond, const ConditionEmbedding& null_cond, double p,
                                   Rng& rng) {
  const auto b = cond.batch(), len = cond.length();
  std::vector<bool> dropped(static_cast<size_t>(b), false);
  if (p <= 0.0) return {cond, dropped};
  auto null_seq = null_cond.sequence.narrow(0, 0, 1).expand({1, len, cond.sequence.size(2)});
  std::vector<torch::Tensor> rows;
  for (int64_t i = 0; i < b; ++i) {
    dropped[static_cast<size_t>(i)] = rng.bernoulli(p);
    rows.push_back(dropped[static_cast<size_t>(i)] ? null_seq : cond.sequence.narrow(0, i, 1));
  }
  return {{torch::cat(rows, 0)}, dropped};
}

ConditionEmbedding ClassLabelProvider::embed(const std::vector<int64_t>& ids) const {
  return generator_->embed_classes(ids);
}

void write_embedding_file(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& r : records) {
    auto v = r.values.to(torch::kFloat).contiguous();
    if (v.dim() != 2) throw InvalidArgument("embedding record values must be L x condition_dim");
    binary::write<int64_t>(os, r.id);
    binary::write<int32_t>(os, static_cast<int32_t>(v.size(0)));
    binary::write<int32_t>(os, static_cast<int32_t>(v.size(1)));
    const float* p = v.data_ptr<float>();
    for (int64_t i = 0; i < v.numel(); ++i) binary::write<float>(os, p[i]);
  }
}

std::vector<EmbeddingRecord> read_embedding_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open embedding file " + path.string());
  std::vector<EmbeddingRecord> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    EmbeddingRecord r;
    r.id = binary::read<int64_t>(is);
    const auto len = binary::read<int32_t>(is);
    const auto dim = binary::read<int32_t>(is);
    if (len < 1 || dim < 1) throw InvalidArgument("embedding record with empty shape");
    r.values = torch::empty({len, dim}, torch::kFloat);
    float* p = r.values.data_ptr<float>();
    for (int64_t i = 0; i < r.values.numel(); ++i) p[i] = binary::read<float>(is);
    out.push_back(std::move(r));
  }
  return out;
}

EmbeddingFileProvider::EmbeddingFileProvider(const std::filesystem::path& path)
    : EmbeddingFileProvider(read_embedding_file(path)) {}

EmbeddingFileProvider::EmbeddingFileProvider(const std::vector<EmbeddingRecord>& records) {
  for (const auto& r : records) {
    if (dim_ == 0) dim_ = r.values.size(1);
    if (r.values.size(1) != dim_) throw InvalidArgument("embedding records disagree on condition_dim");
    table_[r.id] = r.values;
  }
}

ConditionEmbedding EmbeddingFileProvider::embed(const std::vector<int64_t>& ids) const {
  std::vector<torch::Tensor> rows;
  for (auto id : ids) {
    auto it = table_.find(id);
    if (it == table_.end()) throw ConfigError("no condition record for id " + std::to_string(id));
    if (!rows.empty() && rows.front().size(0) != it->second.size(0)) {
      throw InvalidArgument("condition sequences in one batch must share a length");
    }
    rows.push_back(it->second);
  }
  return {torch::stack(rows)};
}

double cosine_learning_rate(double base_lr, int64_t step, int64_t total_steps) {
  if (total_steps <= 0) return base_lr;
  const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace dcar
