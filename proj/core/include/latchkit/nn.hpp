#pragma once

// Parameter containers and the layers the models are built from. Layers hold
// tensor handles that alias the entries of a ParamSet, so optimizer updates
// through the set are seen by the layers.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "latchkit/ops.hpp"
#include "latchkit/random.hpp"
#include "latchkit/tensor.hpp"

LATCHKIT_BEGIN_NAMESPACE

class ParamSet {
 public:
  // Registers a trainable leaf. Names must be unique.
  Tensor add(const std::string& name, Tensor init);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  int64_t count() const;
  void zero_grad();
  // Copies values from another set with identical names and shapes.
  void assign(const ParamSet& other);

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, size_t> index_;
};

namespace nn {

// Uniform in [-bound, bound].
Tensor uniform(Shape shape, double bound, Rng& rng);

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
  Linear() = default;
  Linear(ParamSet& ps, const std::string& name, int64_t in, int64_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamSet& ps, const std::string& name, int64_t dim);
  Tensor operator()(const Tensor& x) const;
};

struct Conv {
  Tensor w;  // [K, Cin, Cout]
  Tensor b;
  ops::ConvSpec spec;
  bool transposed = false;
  Conv() = default;
  Conv(ParamSet& ps, const std::string& name, int64_t cin, int64_t cout, int kernel, ops::ConvSpec spec,
       bool transposed, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

// x + W1x1(gelu(Wk(gelu(x)))) with a dilated kernel-7 convolution.
struct ResidualUnit {
  Conv dilated, pointwise;
  ResidualUnit() = default;
  ResidualUnit(ParamSet& ps, const std::string& name, int64_t channels, int dilation, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

// Rotary position tables for positions [0, length) and head width dim.
struct Rope {
  Tensor cos, sin;  // [length, dim]
  Rope() = default;
  Rope(int64_t length, int64_t dim);
};

// Pre-norm bidirectional transformer layer with rotary attention.
struct TransformerLayer {
  LayerNorm ln1, ln2;
  Linear qkv, out, ff1, ff2;
  int64_t heads = 1;
  TransformerLayer() = default;
  TransformerLayer(ParamSet& ps, const std::string& name, int64_t dim, int64_t heads, int64_t ff, Rng& rng);
  // x [L, dim]; rope tables must cover L positions.
  Tensor operator()(const Tensor& x, const Rope& rope) const;
};

// sin/cos features of t at 16 geometrically spaced frequencies in [1, 1000].
Tensor fourier_features(double t);
inline constexpr int kFourierDims = 32;

}  // namespace nn
LATCHKIT_END_NAMESPACE
