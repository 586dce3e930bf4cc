#pragma once

#include <cstdint>
#include <random>

#include "latchkit/tensor.hpp"

LATCHKIT_BEGIN_NAMESPACE

// Seeded generator. Independent streams for the same seed are obtained with
// Rng(seed, stream); stream 0 is the main sampling stream.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0);

  double normal();
  double uniform();  // [0, 1)
  int64_t uniform_int(int64_t n);  // [0, n)
  Tensor normal(Shape shape);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

LATCHKIT_END_NAMESPACE
