#include "latchkit/nn.hpp"

#include <cmath>

LATCHKIT_BEGIN_NAMESPACE

Tensor ParamSet::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw InvalidArgument("duplicate parameter name: " + name);
  Tensor t = init.detach();
  t.set_requires_grad(true);
  index_[name] = items_.size();
  items_.emplace_back(name, t);
  return t;
}

Tensor ParamSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("unknown parameter: " + name);
  return items_[it->second].second;
}

int64_t ParamSet::count() const {
  int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

void ParamSet::assign(const ParamSet& other) {
  if (other.items_.size() != items_.size()) throw ShapeError("parameter sets differ in size");
  for (size_t i = 0; i < items_.size(); ++i) {
    auto& [name, dst] = items_[i];
    const auto& [oname, src] = other.items_[i];
    if (name != oname || dst.shape() != src.shape())
      throw ShapeError("parameter mismatch at " + name + " vs " + oname);
    auto d = dst.mutable_data();
    auto s = src.data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

namespace nn {

Tensor uniform(Shape shape, double bound, Rng& rng) {
  std::vector<real> v(static_cast<size_t>(latchkit::numel(shape)));
  for (auto& x : v) x = static_cast<real>((2.0 * rng.uniform() - 1.0) * bound);
  return Tensor::from(std::move(shape), std::move(v));
}

Linear::Linear(ParamSet& ps, const std::string& name, int64_t in, int64_t out, Rng& rng) {
  w = ps.add(name + ".w", uniform({in, out}, 1.0 / std::sqrt(double(in)), rng));
  b = ps.add(name + ".b", Tensor::zeros({out}));
}

Tensor Linear::operator()(const Tensor& x) const { return ops::add(ops::matmul(x, w), b); }

LayerNorm::LayerNorm(ParamSet& ps, const std::string& name, int64_t dim) {
  gamma = ps.add(name + ".g", Tensor::full({dim}, 1));
  beta = ps.add(name + ".b", Tensor::zeros({dim}));
}

Tensor LayerNorm::operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

Conv::Conv(ParamSet& ps, const std::string& name, int64_t cin, int64_t cout, int kernel, ops::ConvSpec s,
           bool transposed_, Rng& rng)
    : spec(s), transposed(transposed_) {
  double fan_in = transposed ? double(cin) * kernel / s.stride : double(cin) * kernel;
  w = ps.add(name + ".w", uniform({kernel, cin, cout}, 1.0 / std::sqrt(fan_in), rng));
  b = ps.add(name + ".b", Tensor::zeros({cout}));
}

Tensor Conv::operator()(const Tensor& x) const {
  return transposed ? ops::conv_transpose1d(x, w, b, spec) : ops::conv1d(x, w, b, spec);
}

ResidualUnit::ResidualUnit(ParamSet& ps, const std::string& name, int64_t channels, int dilation, Rng& rng)
    : dilated(ps, name + ".c1", channels, channels, 7, {1, 3 * dilation, dilation}, false, rng),
      pointwise(ps, name + ".c2", channels, channels, 1, {}, false, rng) {}

Tensor ResidualUnit::operator()(const Tensor& x) const {
  return ops::add(x, pointwise(ops::gelu(dilated(ops::gelu(x)))));
}

Rope::Rope(int64_t length, int64_t dim) {
  int64_t half = dim / 2;
  std::vector<real> c(size_t(length * dim)), s(size_t(length * dim));
  for (int64_t p = 0; p < length; ++p) {
    for (int64_t i = 0; i < half; ++i) {
      double freq = std::pow(10000.0, -2.0 * double(i) / double(dim));
      double a = double(p) * freq;
      c[p * dim + i] = c[p * dim + i + half] = real(std::cos(a));
      s[p * dim + i] = s[p * dim + i + half] = real(std::sin(a));
    }
  }
  cos = Tensor::from({length, dim}, std::move(c));
  sin = Tensor::from({length, dim}, std::move(s));
}

namespace {

// [H, L, d]: x * cos + rotate_half(x) * sin.
Tensor apply_rope(const Tensor& x, const Rope& rope) {
  int64_t L = x.dim(1), d = x.dim(2);
  Tensor c = rope.cos.dim(0) == L ? rope.cos : ops::slice(rope.cos, 0, 0, L);
  Tensor s = rope.sin.dim(0) == L ? rope.sin : ops::slice(rope.sin, 0, 0, L);
  Tensor lo = ops::slice(x, 2, 0, d / 2);
  Tensor hi = ops::slice(x, 2, d / 2, d);
  Tensor rot = ops::concat({ops::neg(hi), lo}, 2);
  return ops::add(ops::mul(x, c), ops::mul(rot, s));
}

}  // namespace

TransformerLayer::TransformerLayer(ParamSet& ps, const std::string& name, int64_t dim, int64_t heads_,
                                   int64_t ff, Rng& rng)
    : ln1(ps, name + ".ln1", dim),
      ln2(ps, name + ".ln2", dim),
      qkv(ps, name + ".qkv", dim, 3 * dim, rng),
      out(ps, name + ".out", dim, dim, rng),
      ff1(ps, name + ".ff1", dim, ff, rng),
      ff2(ps, name + ".ff2", ff, dim, rng),
      heads(heads_) {
  if (dim % heads != 0) throw InvalidArgument("dim not divisible by heads");
}

Tensor TransformerLayer::operator()(const Tensor& x, const Rope& rope) const {
  int64_t L = x.dim(0), D = x.dim(1), dh = D / heads;
  if (rope.cos.dim(0) < L || rope.cos.dim(1) != dh) throw ShapeError("rope table does not cover input");
  Tensor h = qkv(ln1(x));
  auto split = [&](int64_t part) {
    Tensor p = ops::slice(h, 1, part * D, (part + 1) * D);
    return ops::swap01(ops::reshape(p, {L, heads, dh}));
  };
  Tensor q = apply_rope(split(0), rope);
  Tensor k = apply_rope(split(1), rope);
  Tensor v = split(2);
  Tensor scores = ops::scale(ops::matmul(q, ops::transpose(k)), real(1.0 / std::sqrt(double(dh))));
  Tensor att = ops::matmul(ops::softmax(scores), v);
  Tensor merged = ops::reshape(ops::swap01(att), {L, D});
  Tensor y = ops::add(x, out(merged));
  return ops::add(y, ff2(ops::gelu(ff1(ln2(y)))));
}

Tensor fourier_features(double t) {
  std::vector<real> f(kFourierDims);
  const int n = kFourierDims / 2;
  for (int i = 0; i < n; ++i) {
    double freq = std::pow(1000.0, double(i) / double(n - 1));
    double a = 2.0 * M_PI * freq * t;
    f[i] = real(std::sin(a));
    f[i + n] = real(std::cos(a));
  }
  return Tensor::from({1, kFourierDims}, std::move(f));
}

}  // namespace nn
LATCHKIT_END_NAMESPACE
