#include "latchkit/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

LATCHKIT_BEGIN_NAMESPACE
namespace ops {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

using MatR = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

// Creates the output node of an operation and records it on the active graph
// when any input needs a gradient.
NodePtr make_output(const char* op, Shape shape, std::initializer_list<const Tensor*> inputs) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->value.assign(static_cast<size_t>(numel(shape)), real(0.0));
  node->shape = std::move(shape);
  Graph* g = Graph::current();
  bool needs = false;
  if (g) {
    for (const Tensor* t : inputs) {
      if (t && t->defined() && t->requires_grad()) needs = true;
    }
  }
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    g->record(node);
  }
  return node;
}

NodePtr make_output(const char* op, Shape shape, const std::vector<Tensor>& inputs) {
  auto node = make_output(op, std::move(shape), {});
  Graph* g = Graph::current();
  if (!g) return node;
  for (const auto& t : inputs) {
    if (t.requires_grad()) {
      node->requires_grad = true;
      node->is_leaf = false;
      g->record(node);
      break;
    }
  }
  return node;
}

bool wants(const NodePtr& n) { return n && n->requires_grad; }

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b, const std::string& why = {}) {
  std::string msg = std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
  if (!why.empty()) msg += " (" + why + ")";
  throw ShapeError(msg);
}

// Right operand must equal the left operand's shape or a suffix of it.
int64_t broadcast_outer(const char* op, const Shape& a, const Shape& b) {
  if (b.size() > a.size()) shape_fail(op, a, b, "right operand may only expand along leading axes");
  for (size_t i = 0; i < b.size(); ++i) {
    if (a[a.size() - b.size() + i] != b[i]) shape_fail(op, a, b, "right operand may only expand along leading axes");
  }
  return numel(b) == 0 ? 0 : numel(a) / numel(b);
}

int norm_axis(const char* op, int axis, size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
  return a;
}

// outer x n x inner decomposition around an axis.
struct AxisSplit {
  int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<size_t>(i)];
  r.n = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  auto out = make_output(op, x.shape(), {&x});
  const auto& xv = x.node()->value;
  auto& yv = out->value;
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = f(xv[i]);
  if (out->requires_grad) {
    NodePtr xn = x.node();
    Node* self = out.get();
    out->backward = [xn, self, df] {
      if (!wants(xn)) return;
      auto& gx = xn->grad_buffer();
      const auto& gy = self->grad;
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * df(xn->value[i], self->value[i]);
    };
  }
  return Tensor(out);
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

template <BinOp kOp>
Tensor binary(const char* op, const Tensor& a, const Tensor& b) {
  const int64_t outer = broadcast_outer(op, a.shape(), b.shape());
  const int64_t inner = b.numel();
  auto out = make_output(op, a.shape(), {&a, &b});
  const real* av = a.node()->value.data();
  const real* bv = b.node()->value.data();
  real* yv = out->value.data();
  for (int64_t o = 0; o < outer; ++o) {
    const real* ar = av + o * inner;
    real* yr = yv + o * inner;
    for (int64_t i = 0; i < inner; ++i) {
      if constexpr (kOp == BinOp::kAdd) yr[i] = ar[i] + bv[i];
      if constexpr (kOp == BinOp::kSub) yr[i] = ar[i] - bv[i];
      if constexpr (kOp == BinOp::kMul) yr[i] = ar[i] * bv[i];
      if constexpr (kOp == BinOp::kDiv) yr[i] = ar[i] / bv[i];
    }
  }
  if (out->requires_grad) {
    NodePtr an = a.node(), bn = b.node();
    Node* self = out.get();
    out->backward = [an, bn, self, outer, inner] {
      const real* gy = self->grad.data();
      if (wants(an)) {
        real* ga = an->grad_buffer().data();
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t i = 0; i < inner; ++i) {
            const int64_t k = o * inner + i;
            if constexpr (kOp == BinOp::kAdd || kOp == BinOp::kSub) ga[k] += gy[k];
            if constexpr (kOp == BinOp::kMul) ga[k] += gy[k] * bn->value[static_cast<size_t>(i)];
            if constexpr (kOp == BinOp::kDiv) ga[k] += gy[k] / bn->value[static_cast<size_t>(i)];
          }
        }
      }
      if (wants(bn)) {
        std::vector<double> acc(static_cast<size_t>(inner), 0.0);
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t i = 0; i < inner; ++i) {
            const int64_t k = o * inner + i;
            const double bi = bn->value[static_cast<size_t>(i)];
            if constexpr (kOp == BinOp::kAdd) acc[i] += gy[k];
            if constexpr (kOp == BinOp::kSub) acc[i] -= gy[k];
            if constexpr (kOp == BinOp::kMul) acc[i] += static_cast<double>(gy[k]) * an->value[k];
            if constexpr (kOp == BinOp::kDiv) acc[i] -= static_cast<double>(gy[k]) * an->value[k] / (bi * bi);
          }
        }
        auto& gb = bn->grad_buffer();
        for (int64_t i = 0; i < inner; ++i) gb[i] += static_cast<real>(acc[i]);
      }
    };
  }
  return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary<BinOp::kAdd>("add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary<BinOp::kSub>("sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary<BinOp::kMul>("mul", a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary<BinOp::kDiv>("div", a, b); }

Tensor neg(const Tensor& x) {
  return unary("neg", x, [](real v) { return -v; }, [](real, real) { return -real(1.0); });
}

Tensor scale(const Tensor& x, real s) {
  return unary("scale", x, [s](real v) { return v * s; }, [s](real, real) { return s; });
}

Tensor add_scalar(const Tensor& x, real s) {
  return unary("add_scalar", x, [s](real v) { return v + s; }, [](real, real) { return real(1.0); });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](real v) { return std::exp(v); }, [](real, real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](real v) { return std::log(v); }, [](real v, real) { return real(1.0) / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary("sqrt", x, [](real v) { return std::sqrt(v); }, [](real, real y) { return real(0.5) / y; });
}

Tensor pow(const Tensor& x, real p) {
  return unary(
      "pow", x, [p](real v) { return std::pow(v, p); },
      [p](real v, real) { return p * std::pow(v, p - real(1.0)); });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](real v) { return v * v; }, [](real v, real) { return real(2.0) * v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](real v) { return std::abs(v); },
      [](real v, real) { return v > 0 ? real(1.0) : (v < 0 ? -real(1.0) : real(0.0)); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](real v) {
        if (v >= 0) return real(1.0) / (real(1.0) + std::exp(-v));
        const real e = std::exp(v);
        return e / (real(1.0) + e);
      },
      [](real, real y) { return y * (real(1.0) - y); });
}

Tensor tanh(const Tensor& x) {
  return unary("tanh", x, [](real v) { return std::tanh(v); }, [](real, real y) { return real(1.0) - y * y; });
}

Tensor gelu(const Tensor& x) {
  constexpr real kInvSqrt2 = real(0.70710678118654752);
  constexpr real kInvSqrt2Pi = real(0.39894228040143268);
  return unary(
      "gelu", x, [](real v) { return real(0.5) * v * (real(1.0) + std::erf(v * kInvSqrt2)); },
      [](real v, real) {
        const real cdf = real(0.5) * (real(1.0) + std::erf(v * kInvSqrt2));
        return cdf + v * kInvSqrt2Pi * std::exp(-real(0.5) * v * v);
      });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](real v) { return v > 0 ? v : real(0.0); }, [](real v, real) { return v > 0 ? real(1.0) : real(0.0); });
}

Tensor clamp(const Tensor& x, real lo, real hi) {
  return unary(
      "clamp", x, [lo, hi](real v) { return std::clamp(v, lo, hi); },
      [lo, hi](real v, real) { return (v >= lo && v <= hi) ? real(1.0) : real(0.0); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  int64_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_b = false;
  Shape out_shape;
  if (as.size() == 2 && bs.size() == 2) {
    m = as[0], k = as[1], n = bs[1];
    if (bs[0] != k) shape_fail("matmul", as, bs);
    out_shape = {m, n};
  } else if (as.size() == 3 && bs.size() == 3) {
    batch = as[0], m = as[1], k = as[2], n = bs[2];
    if (bs[0] != batch || bs[1] != k) shape_fail("matmul", as, bs);
    out_shape = {batch, m, n};
  } else if (as.size() == 3 && bs.size() == 2) {
    m = as[0] * as[1], k = as[2], n = bs[1];
    if (bs[0] != k) shape_fail("matmul", as, bs);
    out_shape = {as[0], as[1], n};
  } else {
    shape_fail("matmul", as, bs, "expected rank 2 or 3");
  }
  shared_b = bs.size() == 2;
  auto out = make_output("matmul", out_shape, {&a, &b});
  for (int64_t i = 0; i < batch; ++i) {
    CMapR A(a.node()->value.data() + i * m * k, m, k);
    CMapR B(b.node()->value.data() + (shared_b ? 0 : i * k * n), k, n);
    MapR C(out->value.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  if (out->requires_grad) {
    NodePtr an = a.node(), bn = b.node();
    Node* self = out.get();
    out->backward = [an, bn, self, batch, m, k, n, shared_b] {
      for (int64_t i = 0; i < batch; ++i) {
        CMapR G(self->grad.data() + i * m * n, m, n);
        if (wants(an)) {
          CMapR B(bn->value.data() + (shared_b ? 0 : i * k * n), k, n);
          MapR GA(an->grad_buffer().data() + i * m * k, m, k);
          GA.noalias() += G * B.transpose();
        }
        if (wants(bn)) {
          CMapR A(an->value.data() + i * m * k, m, k);
          MapR GB(bn->grad_buffer().data() + (shared_b ? 0 : i * k * n), k, n);
          GB.noalias() += A.transpose() * G;
        }
      }
    };
  }
  return Tensor(out);
}

Tensor transpose(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("transpose: rank must be >= 2, got " + to_string(s));
  const int64_t m = s[s.size() - 2], n = s[s.size() - 1];
  const int64_t batch = x.numel() / std::max<int64_t>(m * n, 1);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  auto out = make_output("transpose", os, {&x});
  const real* xv = x.node()->value.data();
  real* yv = out->value.data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) yv[b * m * n + j * m + i] = xv[b * m * n + i * n + j];
  }
  if (out->requires_grad) {
    NodePtr xn = x.node();
    Node* self = out.get();
    out->backward = [xn, self, batch, m, n] {
      if (!wants(xn)) return;
      real* gx = xn->grad_buffer().data();
      const real* gy = self->grad.data();
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) gx[b * m * n + i * n + j] += gy[b * m * n + j * m + i];
    };
  }
  return Tensor(out);
}

Tensor swap01(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("swap01: expected rank 3, got " + to_string(s));
  const int64_t A = s[0], B = s[1], C = s[2];
  auto out = make_output("swap01", {B, A, C}, {&x});
  const real* xv = x.node()->value.data();
  real* yv = out->value.data();
  for (int64_t a = 0; a < A; ++a)
    for (int64_t b = 0; b < B; ++b) std::copy_n(xv + (a * B + b) * C, C, yv + (b * A + a) * C);
  if (out->requires_grad) {
    NodePtr xn = x.node();
    Node* self = out.get();
    out->backward = [xn, self, A, B, C] {
      if (!wants(xn)) return;
      real* gx = xn->grad_buffer().data();
      const real* gy = self->grad.data();
      for (int64_t a = 0; a < A; ++a)
        for (int64_t b = 0; b < B; ++b)
          for (int64_t c = 0; c < C; ++c) gx[(a * B + b) * C + c] += gy[(b * A + a) * C + c];
    };
  }
  return Tensor(out);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) shape_fail("reshape", x.shape(), shape, "element count differs");
  auto out = make_output("reshape", std::move(shape), {&x});
  std::copy(x.node()->value.begin(), x.node()->value.end(), out->value.begin());
  if (out->requires_grad) {
    NodePtr xn = x.node();
    Node* self = out.get();
    out->backward = [xn, self] {
      if (!wants(xn)) return;
      auto& gx = xn->grad_buffer();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += self->grad[i];
    };
  }
  return Tensor(out);
}

Tensor sum(const Tensor& x) {
  auto out = make_output("sum", {}, {&x});
  double acc = 0.0;
  for (real v : x.node()->value) acc += v;
  out->value[0] = static_cast<real>(acc);
  if (out->requires_grad) {
    NodePtr xn = x.node();
    Node* self = out.get();
    out->backward = [xn, self] {
      if (!wants(xn)) return;
      const real g = self->grad[0];
      for (auto& v : xn->grad_buffer()) v += g;
    };
  }
  return Tensor(out);
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(std::max<int64_t>(x.numel(), 1));
  auto out = make_output("mean", {}, {&x});
  double acc = 0.0;
  for (real v : x.node()->value) acc += v;
  out->value[0] = static_cast<real>(acc / n);
  if (out->requires_grad) {
    NodePtr xn = x.node();
    Node* self = out.get();
    out->backward = [xn, self, n] {
      if (!wants(xn)) return;
      const real g = static_cast<real>(self->grad[0] / n);
      for (auto& v : xn->grad_buffer()) v += g;
    };
  }
  return Tensor(out);
}

namespace {
Tensor reduce_axis(const char* op, const Tensor& x, int axis, bool keepdim, bool average) {
  const int a = norm_axis(op, axis, x.shape().size());
  const AxisSplit sp = split_at(x.shape(), a);
  Shape os = x.shape();
  if (keepdim) {
    os[static_cast<size_t>(a)] = 1;
  } else {
    os.erase(os.begin() + a);
  }
  auto out = make_output(op, os, {&x});
  const real* xv = x.node()->value.data();
  const double scale_by = average ? 1.0 / static_cast<double>(std::max<int64_t>(sp.n, 1)) : 1.0;
  std::vector<double> acc(static_cast<size_t>(sp.inner));
  for (int64_t o = 0; o < sp.outer; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int64_t j = 0; j < sp.n; ++j) {
      const real* row = xv + (o * sp.n + j) * sp.inner;
      for (int64_t i = 0; i < sp.inner; ++i) acc[i] += row[i];
    }
    for (int64_t i = 0; i < sp.inner; ++i) out->value[o * sp.inner + i] = static_cast<real>(acc[i] * scale_by);
  }
  if (out->requires_grad) {
    NodePtr xn = x.node();
    Node* self = out.get();
    out->backward = [xn, self, sp, scale_by] {
      if (!wants(xn)) return;
      real* gx = xn->grad_buffer().data();
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t j = 0; j < sp.n; ++j)
          for (int64_t i = 0; i < sp.inner; ++i)
            gx[(o * sp.n + j) * sp.inner + i] += static_cast<real>(self->grad[o * sp.inner + i] * scale_by);
    };
  }
  return Tensor(out);
}
}  // namespace

Tensor sum(const Tensor& x, int axis, bool keepdim) { return reduce_axis("sum_axis", x, axis, keepdim, false); }
Tensor mean(const Tensor& x, int axis, bool keepdim) { return reduce_axis("mean_axis", x, axis, keepdim, true); }

Tensor max_last(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("max_last: needs rank >= 1");
  const int64_t n = x.shape().back();
  const int64_t rows = n == 0 ? 0 : x.numel() / n;
  Shape os = x.shape();
  os.back() = 1;
  auto out = make_output("max_last", os, {&x});
  std::vector<int64_t> arg(static_cast<size_t>(rows));
  const real* xv = x.node()->value.data();
  for (int64_t r = 0; r < rows; ++r) {
    const real* row = xv + r * n;
    const int64_t j = std::max_element(row, row + n) - row;
    arg[r] = j;
    out->value[r] = row[j];
  }
  if (out->requires_grad) {
    NodePtr xn = x.node();
    Node* self = out.get();
    out->backward = [xn, self, arg = std::move(arg), n] {
      if (!wants(xn)) return;
      real* gx = xn->grad_buffer().data();
      for (size_t r = 0; r < arg.size(); ++r) gx[r * n + arg[r]] += self->grad[r];
    };
  }
  return Tensor(out);
}

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("softmax: needs rank >= 1");
  const int64_t n = x.shape().back();
  const int64_t rows = n == 0 ? 0 : x.numel() / n;
  auto out = make_output("softmax", x.shape(), {&x});
  const real* xv = x.node()->value.data();
  real* yv = out->value.data();
  for (int64_t r = 0; r < rows; ++r) {
    const real* row = xv + r * n;
    real* yr = yv + r * n;
    const real mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      yr[j] = std::exp(row[j] - mx);
      z += yr[j];
    }
    const real inv = static_cast<real>(1.0 / z);
    for (int64_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  if (out->requires_grad) {
    NodePtr xn = x.node();
    Node* self = out.get();
    out->backward = [xn, self, rows, n] {
      if (!wants(xn)) return;
      real* gx = xn->grad_buffer().data();
      for (int64_t r = 0; r < rows; ++r) {
        const real* y = self->value.data() + r * n;
        const real* gy = self->grad.data() + r * n;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += static_cast<double>(gy[j]) * y[j];
        for (int64_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * static_cast<real>(gy[j] - dot);
      }
    };
  }
  return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: needs rank >= 1");
  const int64_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) shape_fail("layer_norm", x.shape(), gamma.shape());
  const int64_t rows = d == 0 ? 0 : x.numel() / d;
  auto out = make_output("layer_norm", x.shape(), {&x, &gamma, &beta});
  Buffer xhat(x.node()->value.size());
  std::vector<real> rstd(static_cast<size_t>(rows));
  const real* xv = x.node()->value.data();
  const real* gv = gamma.node()->value.data();
  const real* bv = beta.node()->value.data();
  for (int64_t r = 0; r < rows; ++r) {
    const real* row = xv + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const real rs = static_cast<real>(1.0 / std::sqrt(var + eps));
    rstd[r] = rs;
    for (int64_t j = 0; j < d; ++j) {
      const real h = static_cast<real>(row[j] - mu) * rs;
      xhat[r * d + j] = h;
      out->value[r * d + j] = h * gv[j] + bv[j];
    }
  }
  if (out->requires_grad) {
    NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
    Node* self = out.get();
    out->backward = [xn, gn, bn, self, xhat = std::move(xhat), rstd = std::move(rstd), rows, d] {
      const real* gy = self->grad.data();
      if (wants(gn) || wants(bn)) {
        std::vector<double> dg(static_cast<size_t>(d), 0.0), db(static_cast<size_t>(d), 0.0);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < d; ++j) {
            dg[j] += static_cast<double>(gy[r * d + j]) * xhat[r * d + j];
            db[j] += gy[r * d + j];
          }
        if (wants(gn)) {
          auto& g = gn->grad_buffer();
          for (int64_t j = 0; j < d; ++j) g[j] += static_cast<real>(dg[j]);
        }
        if (wants(bn)) {
          auto& g = bn->grad_buffer();
          for (int64_t j = 0; j < d; ++j) g[j] += static_cast<real>(db[j]);
        }
      }
      if (wants(xn)) {
        real* gx = xn->grad_buffer().data();
        const real* gv = gn->value.data();
        for (int64_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (int64_t j = 0; j < d; ++j) {
            const double dh = static_cast<double>(gy[r * d + j]) * gv[j];
            m1 += dh;
            m2 += dh * xhat[r * d + j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (int64_t j = 0; j < d; ++j) {
            const double dh = static_cast<double>(gy[r * d + j]) * gv[j];
            gx[r * d + j] += static_cast<real>(rstd[r] * (dh - m1 - xhat[r * d + j] * m2));
          }
        }
      }
    };
  }
  return Tensor(out);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int a = norm_axis("concat", axis, s0.size());
  Shape os = s0;
  int64_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) shape_fail("concat", s0, s);
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != a && s[i] != s0[i]) shape_fail("concat", s0, s);
    total += s[static_cast<size_t>(a)];
  }
  os[static_cast<size_t>(a)] = total;
  auto out = make_output("concat", os, parts);
  const AxisSplit osp = split_at(os, a);
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const int64_t len = p.shape()[static_cast<size_t>(a)];
    for (int64_t o = 0; o < osp.outer; ++o)
      std::copy_n(p.node()->value.data() + o * len * osp.inner, len * osp.inner,
                  out->value.data() + (o * osp.n + off) * osp.inner);
    off += len;
  }
  if (out->requires_grad) {
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    Node* self = out.get();
    out->backward = [nodes, offsets, self, osp, a] {
      for (size_t k = 0; k < nodes.size(); ++k) {
        if (!wants(nodes[k])) continue;
        const int64_t len = nodes[k]->shape[static_cast<size_t>(a)];
        real* g = nodes[k]->grad_buffer().data();
        for (int64_t o = 0; o < osp.outer; ++o) {
          const real* src = self->grad.data() + (o * osp.n + offsets[k]) * osp.inner;
          real* dst = g + o * len * osp.inner;
          for (int64_t i = 0; i < len * osp.inner; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return Tensor(out);
}

Tensor slice(const Tensor& x, int axis, int64_t begin, int64_t end) {
  const int a = norm_axis("slice", axis, x.shape().size());
  const AxisSplit sp = split_at(x.shape(), a);
  if (begin < 0 || end > sp.n || begin > end)
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " + to_string(x.shape()));
  Shape os = x.shape();
  const int64_t len = end - begin;
  os[static_cast<size_t>(a)] = len;
  auto out = make_output("slice", os, {&x});
  for (int64_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.node()->value.data() + (o * sp.n + begin) * sp.inner, len * sp.inner,
                out->value.data() + o * len * sp.inner);
  if (out->requires_grad) {
    NodePtr xn = x.node();
    Node* self = out.get();
    out->backward = [xn, self, sp, begin, len] {
      if (!wants(xn)) return;
      real* gx = xn->grad_buffer().data();
      for (int64_t o = 0; o < sp.outer; ++o) {
        const real* src = self->grad.data() + o * len * sp.inner;
        real* dst = gx + (o * sp.n + begin) * sp.inner;
        for (int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
      }
    };
  }
  return Tensor(out);
}

Tensor gather(const Tensor& x, const std::vector<int64_t>& index, Shape out_shape) {
  if (numel(out_shape) != static_cast<int64_t>(index.size()))
    throw ShapeError("gather: index count " + std::to_string(index.size()) + " does not match shape " + to_string(out_shape));
  const int64_t n = x.numel();
  for (int64_t i : index)
    if (i >= n) throw ShapeError("gather: index " + std::to_string(i) + " out of range for " + to_string(x.shape()));
  auto out = make_output("gather", std::move(out_shape), {&x});
  const real* xv = x.node()->value.data();
  for (size_t i = 0; i < index.size(); ++i) out->value[i] = index[i] < 0 ? real(0.0) : xv[index[i]];
  if (out->requires_grad) {
    NodePtr xn = x.node();
    Node* self = out.get();
    out->backward = [xn, self, index] {
      if (!wants(xn)) return;
      real* gx = xn->grad_buffer().data();
      for (size_t i = 0; i < index.size(); ++i)
        if (index[i] >= 0) gx[index[i]] += self->grad[i];
    };
  }
  return Tensor(out);
}

Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& rows) {
  if (table.rank() != 2) throw ShapeError("gather_rows: expected [N, D] table, got " + to_string(table.shape()));
  const int64_t n = table.dim(0), d = table.dim(1);
  std::vector<int64_t> idx;
  idx.reserve(rows.size() * static_cast<size_t>(d));
  for (int64_t r : rows) {
    if (r < 0 || r >= n) throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for " + to_string(table.shape()));
    for (int64_t j = 0; j < d; ++j) idx.push_back(r * d + j);
  }
  return gather(table, idx, {static_cast<int64_t>(rows.size()), d});
}

namespace {
void check_conv(const char* op, const Tensor& x, const Tensor& w, const Tensor& b, ConvSpec spec) {
  if (x.rank() != 2) throw ShapeError(std::string(op) + ": input must be [L, C], got " + to_string(x.shape()));
  if (w.rank() != 3) throw ShapeError(std::string(op) + ": weight must be [K, Cin, Cout], got " + to_string(w.shape()));
  if (w.dim(1) != x.dim(1)) shape_fail(op, x.shape(), w.shape(), "channel count");
  if (b.defined() && b.shape() != Shape{w.dim(2)}) shape_fail(op, w.shape(), b.shape(), "bias");
  if (spec.stride < 1 || spec.dilation < 1 || spec.padding < 0) throw ShapeError(std::string(op) + ": invalid stride/dilation/padding");
}
}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvSpec spec) {
  check_conv("conv1d", x, weight, bias, spec);
  const int64_t L = x.dim(0), cin = x.dim(1);
  const int64_t K = weight.dim(0), cout = weight.dim(2);
  const int64_t span = static_cast<int64_t>(spec.dilation) * (K - 1) + 1;
  const int64_t lout = (L + 2 * spec.padding - span) / spec.stride + 1;
  if (lout < 1) shape_fail("conv1d", x.shape(), weight.shape(), "input shorter than kernel");
  auto out = make_output("conv1d", {lout, cout}, {&x, &weight, &bias});
  const int64_t kc = K * cin;
  Buffer cols(static_cast<size_t>(lout * kc), real(0.0));
  const real* xv = x.node()->value.data();
  for (int64_t o = 0; o < lout; ++o) {
    for (int64_t k = 0; k < K; ++k) {
      const int64_t pos = o * spec.stride - spec.padding + k * spec.dilation;
      if (pos < 0 || pos >= L) continue;
      std::copy_n(xv + pos * cin, cin, cols.data() + o * kc + k * cin);
    }
  }
  {
    CMapR C(cols.data(), lout, kc);
    CMapR W(weight.node()->value.data(), kc, cout);
    MapR Y(out->value.data(), lout, cout);
    Y.noalias() = C * W;
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<real, 1, Eigen::Dynamic>> bv(bias.node()->value.data(), cout);
      Y.rowwise() += bv;
    }
  }
  if (out->requires_grad) {
    NodePtr xn = x.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : nullptr;
    Node* self = out.get();
    out->backward = [xn, wn, bn, self, cols = std::move(cols), L, cin, K, cout, lout, kc, spec] {
      CMapR G(self->grad.data(), lout, cout);
      if (wants(wn)) {
        CMapR C(cols.data(), lout, kc);
        MapR GW(wn->grad_buffer().data(), kc, cout);
        GW.noalias() += C.transpose() * G;
      }
      if (bn && wants(bn)) {
        auto& gb = bn->grad_buffer();
        for (int64_t j = 0; j < cout; ++j) {
          double acc = 0.0;
          for (int64_t o = 0; o < lout; ++o) acc += G(o, j);
          gb[j] += static_cast<real>(acc);
        }
      }
      if (wants(xn)) {
        CMapR W(wn->value.data(), kc, cout);
        MatR dcols = G * W.transpose();
        real* gx = xn->grad_buffer().data();
        for (int64_t o = 0; o < lout; ++o) {
          for (int64_t k = 0; k < K; ++k) {
            const int64_t pos = o * spec.stride - spec.padding + k * spec.dilation;
            if (pos < 0 || pos >= L) continue;
            const real* src = dcols.data() + o * kc + k * cin;
            real* dst = gx + pos * cin;
            for (int64_t c = 0; c < cin; ++c) dst[c] += src[c];
          }
        }
      }
    };
  }
  return Tensor(out);
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvSpec spec) {
  check_conv("conv_transpose1d", x, weight, bias, spec);
  const int64_t L = x.dim(0), cin = x.dim(1);
  const int64_t K = weight.dim(0), cout = weight.dim(2);
  const int64_t lout = (L - 1) * spec.stride - 2 * spec.padding + spec.dilation * (K - 1) + 1;
  if (lout < 1) shape_fail("conv_transpose1d", x.shape(), weight.shape(), "empty output");
  auto out = make_output("conv_transpose1d", {lout, cout}, {&x, &weight, &bias});
  // Weight [K, Cin, Cout] viewed as [Cin, K * Cout].
  const int64_t kc = K * cout;
  MatR wt(cin, kc);
  const real* wv = weight.node()->value.data();
  for (int64_t k = 0; k < K; ++k)
    for (int64_t c = 0; c < cin; ++c)
      for (int64_t j = 0; j < cout; ++j) wt(c, k * cout + j) = wv[(k * cin + c) * cout + j];
  MatR cols = CMapR(x.node()->value.data(), L, cin) * wt;
  real* yv = out->value.data();
  for (int64_t i = 0; i < L; ++i) {
    for (int64_t k = 0; k < K; ++k) {
      const int64_t pos = i * spec.stride - spec.padding + k * spec.dilation;
      if (pos < 0 || pos >= lout) continue;
      const real* src = cols.data() + i * kc + k * cout;
      real* dst = yv + pos * cout;
      for (int64_t j = 0; j < cout; ++j) dst[j] += src[j];
    }
  }
  if (bias.defined()) {
    const real* bv = bias.node()->value.data();
    for (int64_t o = 0; o < lout; ++o)
      for (int64_t j = 0; j < cout; ++j) yv[o * cout + j] += bv[j];
  }
  if (out->requires_grad) {
    NodePtr xn = x.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : nullptr;
    Node* self = out.get();
    out->backward = [xn, wn, bn, self, wt = std::move(wt), L, cin, K, cout, lout, kc, spec] {
      const real* gy = self->grad.data();
      if (bn && wants(bn)) {
        auto& gb = bn->grad_buffer();
        for (int64_t j = 0; j < cout; ++j) {
          double acc = 0.0;
          for (int64_t o = 0; o < lout; ++o) acc += gy[o * cout + j];
          gb[j] += static_cast<real>(acc);
        }
      }
      MatR dcols = MatR::Zero(L, kc);
      for (int64_t i = 0; i < L; ++i)
        for (int64_t k = 0; k < K; ++k) {
          const int64_t pos = i * spec.stride - spec.padding + k * spec.dilation;
          if (pos < 0 || pos >= lout) continue;
          std::copy_n(gy + pos * cout, cout, dcols.data() + i * kc + k * cout);
        }
      if (wants(xn)) {
        MapR GX(xn->grad_buffer().data(), L, cin);
        GX.noalias() += dcols * wt.transpose();
      }
      if (wants(wn)) {
        MatR gwt = CMapR(xn->value.data(), L, cin).transpose() * dcols;
        real* gw = wn->grad_buffer().data();
        for (int64_t k = 0; k < K; ++k)
          for (int64_t c = 0; c < cin; ++c)
            for (int64_t j = 0; j < cout; ++j) gw[(k * cin + c) * cout + j] += gwt(c, k * cout + j);
      }
    };
  }
  return Tensor(out);
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) shape_fail("mse", pred.shape(), target.shape());
  return mean(square(sub(pred, target)));
}

namespace {
Tensor bce_logits_elems(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape()) shape_fail("bce_with_logits", logits.shape(), target.shape());
  auto out = make_output("bce_logits", logits.shape(), {&logits});
  const real* l = logits.node()->value.data();
  const real* e = target.node()->value.data();
  for (size_t i = 0; i < out->value.size(); ++i) {
    const real v = l[i];
    out->value[i] = std::max(v, real(0.0)) - v * e[i] + std::log1p(std::exp(-std::abs(v)));
  }
  if (out->requires_grad) {
    NodePtr ln = logits.node(), en = target.node();
    Node* self = out.get();
    out->backward = [ln, en, self] {
      if (!wants(ln)) return;
      auto& g = ln->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) {
        const real v = ln->value[i];
        const real s = v >= 0 ? real(1.0) / (real(1.0) + std::exp(-v)) : std::exp(v) / (real(1.0) + std::exp(v));
        g[i] += self->grad[i] * (s - en->value[i]);
      }
    };
  }
  return Tensor(out);
}

Tensor bce_prob_elems(const Tensor& prob, const Tensor& target, real eps) {
  if (prob.shape() != target.shape()) shape_fail("bce_prob", prob.shape(), target.shape());
  auto out = make_output("bce_prob", prob.shape(), {&prob});
  const real* p = prob.node()->value.data();
  const real* e = target.node()->value.data();
  for (size_t i = 0; i < out->value.size(); ++i) {
    const real pc = std::clamp(p[i], eps, real(1.0) - eps);
    out->value[i] = -(e[i] * std::log(pc) + (real(1.0) - e[i]) * std::log(real(1.0) - pc));
  }
  if (out->requires_grad) {
    NodePtr pn = prob.node(), en = target.node();
    Node* self = out.get();
    out->backward = [pn, en, self, eps] {
      if (!wants(pn)) return;
      auto& g = pn->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) {
        const real v = pn->value[i];
        if (v < eps || v > real(1.0) - eps) continue;
        const real t = en->value[i];
        g[i] += self->grad[i] * (-t / v + (real(1.0) - t) / (real(1.0) - v));
      }
    };
  }
  return Tensor(out);
}
}  // namespace

Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
  return mean(bce_logits_elems(logits, target));
}

Tensor bce_prob(const Tensor& prob, const Tensor& target, real eps) {
  return mean(bce_prob_elems(prob, target, eps));
}

Tensor bce_with_logits_elementwise(const Tensor& logits, const Tensor& target) {
  return bce_logits_elems(logits, target);
}

Tensor bce_prob_elementwise(const Tensor& prob, const Tensor& target, real eps) {
  return bce_prob_elems(prob, target, eps);
}

}  // namespace ops
LATCHKIT_END_NAMESPACE
