// Gradient checks run against the double-precision build so that central
// differences are not swamped by single-precision rounding.
#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "latchkit/gradcheck.hpp"
#include "latchkit/ops.hpp"
#include "latchkit/tensor.hpp"
#include "test_util.hpp"

namespace latchkit {
namespace {

using testing::probe;
using testing::random_tensor;

static_assert(sizeof(real) == 8);

TEST(FiniteDiff, LinearIsExact) {
  Tensor x = Tensor::from({4}, {0.3, -1.2, 2.0, 0.7});
  const double err = finite_diff_check([](const Tensor& v) { return ops::sum(ops::scale(v, 3.0)); }, x, 1e-3);
  EXPECT_LT(err, 1e-6);
}

TEST(FiniteDiff, ConvDifferenceKernelOnRamp) {
  std::vector<real> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[i] = 0.1 * static_cast<real>(i);
  Tensor x = Tensor::from({16, 1}, ramp);
  Tensor k = Tensor::from({2, 1, 1}, {1.0, -1.0});
  auto f = [&](const Tensor& kernel) { return ops::sum(ops::conv1d(x, kernel, Tensor(), {})); };
  EXPECT_LT(finite_diff_check(f, k, 1e-3), 1e-6);
}

TEST(FiniteDiff, TwoLayerGeluMlp) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({4, 6}, rng);
  Tensor w1 = random_tensor({6, 8}, rng, -0.5, 0.5);
  Tensor w2 = random_tensor({8, 3}, rng, -0.5, 0.5);
  auto f = [&](const Tensor& w) { return probe(ops::matmul(ops::gelu(ops::matmul(x, w)), w2)); };
  EXPECT_LT(finite_diff_check(f, w1, 1e-3), 1e-4);
}

class GradientCheck : public ::testing::TestWithParam<std::string> {};

TEST_P(GradientCheck, MatchesCentralDifference) {
  const GradCheck r = run_gradient_check(GetParam());
  EXPECT_LT(r.error, r.tolerance) << r.name;
}

INSTANTIATE_TEST_SUITE_P(All, GradientCheck, ::testing::ValuesIn(gradient_check_names()),
                         [](const auto& info) { return info.param; });

}  // namespace
}  // namespace latchkit
