#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace dcar {

// Seeded random source shared by every stochastic operation. Tensor draws
// derive a fresh torch generator from the engine so the whole stream is
// reproducible from the engine state alone.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0);

  uint64_t next_u64();
  double uniform();                // [0, 1)
  double uniform_open_closed();    // (0, 1]
  double normal();
  int64_t randint(int64_t n);      // [0, n)
  bool bernoulli(double p);
  std::vector<int64_t> permutation(int64_t n);

  torch::Tensor normal_tensor(torch::IntArrayRef shape);
  torch::Tensor uniform_tensor(torch::IntArrayRef shape);
  torch::Tensor randint_tensor(int64_t low, int64_t high, torch::IntArrayRef shape);

  // Independent child stream; advances this stream by one draw.
  Rng split();

  std::string state() const;
  void set_state(const std::string& s);

  std::mt19937_64& engine() { return engine_; }

 private:
  at::Generator make_generator();
  std::mt19937_64 engine_;
};

// Stateless 64-bit mix used to derive per-item seeds from (seed, index).
uint64_t mix_seed(uint64_t seed, uint64_t index);

}  // namespace dcar
