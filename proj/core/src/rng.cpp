#include "dcar/rng.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <numeric>
#include <sstream>

namespace dcar {

Rng::Rng(uint64_t seed) : engine_(seed) {}

uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

double Rng::uniform_open_closed() { return 1.0 - uniform(); }

double Rng::normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

int64_t Rng::randint(int64_t n) {
  return std::uniform_int_distribution<int64_t>(0, n - 1)(engine_);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

std::vector<int64_t> Rng::permutation(int64_t n) {
  std::vector<int64_t> out(static_cast<size_t>(n));
  std::iota(out.begin(), out.end(), 0);
  std::shuffle(out.begin(), out.end(), engine_);
  return out;
}

at::Generator Rng::make_generator() {
  return at::make_generator<at::CPUGeneratorImpl>(next_u64());
}

torch::Tensor Rng::normal_tensor(torch::IntArrayRef shape) {
  auto gen = make_generator();
  return at::randn(shape, gen, torch::kFloat);
}

torch::Tensor Rng::uniform_tensor(torch::IntArrayRef shape) {
  auto gen = make_generator();
  return at::rand(shape, gen, torch::kFloat);
}

torch::Tensor Rng::randint_tensor(int64_t low, int64_t high, torch::IntArrayRef shape) {
  auto gen = make_generator();
  return at::randint(low, high, shape, gen, torch::kLong);
}

Rng Rng::split() { return Rng(next_u64()); }

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
}

uint64_t mix_seed(uint64_t seed, uint64_t index) {
  // splitmix64 finalizer over a combined key
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace dcar
