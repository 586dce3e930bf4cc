#include "latchkit/random.hpp"

LATCHKIT_BEGIN_NAMESPACE

namespace {
std::mt19937_64 seeded(uint64_t seed, uint64_t stream) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}
}  // namespace

Rng::Rng(uint64_t seed, uint64_t stream) : engine_(seeded(seed, stream)) {}

double Rng::normal() { return normal_(engine_); }

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

int64_t Rng::uniform_int(int64_t n) { return std::uniform_int_distribution<int64_t>(0, n - 1)(engine_); }

Tensor Rng::normal(Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<real>(normal_(engine_));
  return t;
}

LATCHKIT_END_NAMESPACE
