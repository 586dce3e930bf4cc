#pragma once

// Differentiable primitives. Binary elementwise operations accept operands of
// identical shape, or a right operand whose shape is a suffix of the left
// operand's shape (expanded along the leading axes). Anything else needs an
// explicit reshape/transpose.

#include <vector>

#include "latchkit/tensor.hpp"

LATCHKIT_BEGIN_NAMESPACE
namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, real s);
Tensor add_scalar(const Tensor& x, real s);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor pow(const Tensor& x, real exponent);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor clamp(const Tensor& x, real lo, real hi);

// [.., M, K] x [K, N] or batched [B, M, K] x [B, K, N].
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes.
Tensor transpose(const Tensor& x);
// [A, B, C] -> [B, A, C].
Tensor swap01(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reduction over one axis; the axis is removed unless keepdim.
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
// Maximum over the last axis (the axis is kept with size 1).
Tensor max_last(const Tensor& x);

Tensor softmax(const Tensor& x);  // over the last axis
// Normalizes the last axis to zero mean / unit variance, then gamma*x+beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps = 1e-5);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t begin, int64_t end);
// out.flat[i] = x.flat[index[i]], or 0 when index[i] < 0.
Tensor gather(const Tensor& x, const std::vector<int64_t>& index, Shape out_shape);
// Rows of a [N, D] table.
Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& rows);

struct ConvSpec {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

// Time-major 1-D convolution: x [L, Cin], weight [K, Cin, Cout], bias [Cout]
// (bias may be undefined). Output [Lout, Cout].
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvSpec spec);
// Transposed convolution: x [L, Cin], weight [K, Cin, Cout]; output length
// (L - 1) * stride - 2 * padding + dilation * (K - 1) + 1.
Tensor conv_transpose1d(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvSpec spec);

// Losses used throughout.
Tensor mse(const Tensor& pred, const Tensor& target);
// Mean binary cross entropy from logits against soft targets.
Tensor bce_with_logits(const Tensor& logits, const Tensor& target);
// Mean binary cross entropy from probabilities, clamped to [eps, 1 - eps].
Tensor bce_prob(const Tensor& prob, const Tensor& target, real eps = 1e-6);
// Unreduced variants. Targets are treated as constants.
Tensor bce_with_logits_elementwise(const Tensor& logits, const Tensor& target);
Tensor bce_prob_elementwise(const Tensor& prob, const Tensor& target, real eps = 1e-6);

}  // namespace ops
LATCHKIT_END_NAMESPACE
