#include <benchmark/benchmark.h>

#include <torch/torch.h>

#include "dcar/diffusion_head.hpp"
#include "dcar/mask_transformer.hpp"
#include "dcar/quantizer.hpp"
#include "dcar/rng.hpp"
#include "dcar/sampler.hpp"
#include "dcar/tokenizer.hpp"

using namespace dcar;

namespace {

GeneratorConfig desk_generator(int64_t grid) {
  GeneratorConfig c;
  c.layers = 4;
  c.width = 128;
  c.heads = 4;
  c.mlp_ratio = 4;
  c.vocab = 512;
  c.condition_dim = 128;
  c.num_classes = 12;
  c.max_grid_h = grid;
  c.max_grid_w = grid;
  return c;
}

DiffusionHeadConfig desk_head() {
  DiffusionHeadConfig c;
  c.mlp_layers = 3;
  c.hidden_width = 128;
  c.target_dim = 8;
  c.condition_width = 128;
  return c;
}

}  // namespace

static void BM_Quantize(benchmark::State& state) {
  torch::NoGradGuard ng;
  const auto n = state.range(0);
  Codebook cb(n, 8, 1);
  Rng rng(2);
  auto z = LatentGrid(rng.normal_tensor({16, 8, 8, 8}).to(torch::kFloat));
  for (auto _ : state) benchmark::DoNotOptimize(cb->quantize(z, false).first.indices().data_ptr());
  state.SetItemsProcessed(state.iterations() * 16 * 64);
}
BENCHMARK(BM_Quantize)->Arg(64)->Arg(512)->Unit(benchmark::kMicrosecond);

static void BM_TokenizerReconstruct(benchmark::State& state) {
  torch::NoGradGuard ng;
  TokenizerConfig tc;
  tc.compression_factor = 8;
  tc.latent_channels = 8;
  tc.base_width = 16;
  tc.max_width = 128;
  tc.stage_depths = {1, 1, 1};
  tc.codebook_size = 512;
  TokenizerModel tok(tc);
  tok->eval();
  Rng rng(3);
  auto img = ImageTensor(rng.uniform_tensor({16, 3, 32, 32}).to(torch::kFloat) * 2 - 1);
  const auto path = state.range(0) ? Path::continuous : Path::discrete;
  for (auto _ : state) benchmark::DoNotOptimize(tok->reconstruct(img, path).data().data_ptr());
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_TokenizerReconstruct)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_TransformerForward(benchmark::State& state) {
  torch::NoGradGuard ng;
  const auto grid = state.range(0);
  MaskTransformer g(desk_generator(grid));
  g->eval();
  auto mask = fully_masked(16, grid, grid);
  std::vector<int64_t> labels(16, 1);
  auto cond = g->embed_classes(labels);
  for (auto _ : state) benchmark::DoNotOptimize(g->forward(mask, cond).logits.data_ptr());
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_TransformerForward)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

static void BM_CommitStep(benchmark::State& state) {
  torch::NoGradGuard ng;
  Rng rng(4);
  auto logits = rng.normal_tensor({16, 64, 512}).to(torch::kFloat);
  SamplerConfig sc;
  for (auto _ : state) {
    state.PauseTiming();
    auto mask = fully_masked(16, 8, 8);
    std::vector<Rng> rngs;
    for (uint64_t i = 0; i < 16; ++i) rngs.emplace_back(i);
    state.ResumeTiming();
    benchmark::DoNotOptimize(commit_step(mask, logits, sc, 0, rngs).mask.data_ptr());
  }
}
BENCHMARK(BM_CommitStep)->Unit(benchmark::kMicrosecond);

static void BM_Denoise(benchmark::State& state) {
  torch::NoGradGuard ng;
  DiffusionHead head(desk_head());
  head->set_stats({torch::zeros({8}), torch::ones({8})});
  Rng rng(5);
  const int64_t rows = 16 * 64;
  auto cond = rng.normal_tensor({rows, 128}).to(torch::kFloat);
  std::vector<uint64_t> seeds;
  for (int64_t i = 0; i < rows; ++i) seeds.push_back(mix_seed(7, static_cast<uint64_t>(i)));
  for (auto _ : state) benchmark::DoNotOptimize(denoise(cond, head, state.range(0), seeds).data_ptr());
  state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(BM_Denoise)->Arg(10)->Arg(20)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
