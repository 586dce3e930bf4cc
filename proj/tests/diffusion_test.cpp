#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "latchkit/diffusion.hpp"
#include "latchkit/ops.hpp"
#include "test_util.hpp"

namespace latchkit {
namespace {

using testing::random_tensor;

double variance(std::span<const real> v) {
  double m = 0, q = 0;
  for (real x : v) m += x;
  m /= static_cast<double>(v.size());
  for (real x : v) q += (x - m) * (x - m);
  return q / static_cast<double>(v.size());
}

TEST(Schedule, Boundaries) {
  auto a0 = NoiseSchedule::at(0.0);
  EXPECT_EQ(a0.alpha, 1.0);
  EXPECT_EQ(a0.sigma, 0.0);
  auto a1 = NoiseSchedule::at(1.0);
  EXPECT_EQ(a1.alpha, 0.0);
  EXPECT_EQ(a1.sigma, 1.0);
  auto h = NoiseSchedule::at(0.5);
  EXPECT_NEAR(h.alpha, 0.70710678, 1e-8);
  EXPECT_NEAR(h.sigma, 0.70710678, 1e-8);
  EXPECT_THROW(NoiseSchedule::at(1.5), Error);
  EXPECT_THROW(NoiseSchedule::at(-0.1), Error);
}

TEST(Schedule, VariancePreservingAndFeasibleEta) {
  NoiseSchedule sched(100);
  for (int k = 0; k < 100; ++k) {
    auto [a, s] = NoiseSchedule::at(sched.time(k));
    EXPECT_NEAR(a * a + s * s, 1.0, 1e-12);
    EXPECT_GE(sched.eta(k), 0.0);
    EXPECT_LE(sched.eta(k), NoiseSchedule::sigma(sched.prev_time(k)) + 1e-15);
  }
  EXPECT_EQ(sched.time(0), 1.0);
  EXPECT_EQ(sched.prev_time(99), 0.0);
  EXPECT_EQ(NoiseSchedule(100, 0.0).eta(10), 0.0);
}

TEST(StepWeight, SumsToOne) {
  for (int T : {1, 2, 7, 50, 100, 1000}) {
    StepWeights w{NoiseSchedule(T)};
    double total = 0;
    for (double v : w.values()) total += v;
    EXPECT_NEAR(total, 1.0, 1e-6) << T;
  }
}

TEST(StepWeight, DoublingNormalizerAndStrengthIsInvariant) {
  NoiseSchedule sched(100);
  StepWeights w1(sched), w2(sched, 2.0);
  const double rho = 0.03;
  for (int k = 0; k < 100; ++k) EXPECT_EQ(rho * w1[k], (2 * rho) * w2[k]);
}

TEST(VSplit, Examples) {
  auto a = v_split(Tensor::from({1}, {1}), Tensor::from({1}, {0}), 0.5);
  EXPECT_NEAR(a.z0.item(), 0.7071068, 1e-6);
  EXPECT_NEAR(a.eps.item(), 0.7071068, 1e-6);
  auto b = v_split(Tensor::from({1}, {0}), Tensor::from({1}, {1}), 0.0);
  EXPECT_EQ(b.z0.item(), 0.0f);
  EXPECT_EQ(b.eps.item(), 1.0f);
  EXPECT_THROW(v_split(Tensor::zeros({2}), Tensor::zeros({3}), 0.3), ShapeError);
}

TEST(VSplit, ReconstructionIdentity) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ut(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double t = trial == 0 ? 0.3 : ut(rng);
    Tensor z = random_tensor({16, 8}, rng), v = random_tensor({16, 8}, rng);
    auto [z0, eps] = v_split(z, v, t);
    auto [a, s] = NoiseSchedule::at(t);
    auto zr = ops::add(ops::scale(z0, real(a)), ops::scale(eps, real(s)));
    for (int64_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(zr.data()[i], z.data()[i], 1e-5);
  }
}

TEST(VTarget, BoundariesAndInverse) {
  std::mt19937_64 rng(6);
  Tensor z0 = random_tensor({4, 3}, rng), eps = random_tensor({4, 3}, rng);
  EXPECT_EQ(v_target(z0, eps, 0.0).to_vector(), eps.to_vector());
  auto v1 = v_target(z0, eps, 1.0).to_vector();
  for (size_t i = 0; i < v1.size(); ++i) EXPECT_EQ(v1[i], -z0.data()[i]);
  const double t = 0.37;
  Tensor zt = forward_diffuse(z0, t, eps);
  auto back = v_split(zt, v_target(z0, eps, t), t);
  for (int64_t i = 0; i < z0.numel(); ++i) {
    EXPECT_NEAR(back.z0.data()[i], z0.data()[i], 1e-5);
    EXPECT_NEAR(back.eps.data()[i], eps.data()[i], 1e-5);
  }
}

TEST(Ddim, HandAlgebra) {
  Tensor z = Tensor::from({1}, {1}), v = Tensor::from({1}, {0}), n = Tensor::from({1}, {0});
  EXPECT_NEAR(ddim_step(z, v, 0.5, 0.25, 0.0, n).item(), 0.96593, 1e-5);
}

TEST(Ddim, FinalStepReturnsCleanEstimate) {
  std::mt19937_64 rng(8);
  Tensor z = random_tensor({5, 2}, rng), v = random_tensor({5, 2}, rng), n = random_tensor({5, 2}, rng);
  auto z0 = v_split(z, v, 0.01).z0;
  EXPECT_EQ(ddim_step(z, v, 0.01, 0.0, 0.0, n).to_vector(), z0.to_vector());
}

TEST(Ddim, FullEtaDropsNoiseEstimate) {
  Tensor z = Tensor::from({2}, {1.0, -0.5}), v = Tensor::zeros({2}), n = Tensor::zeros({2});
  const double tp = 0.25;
  const double eta = NoiseSchedule::sigma(tp);
  auto out = ddim_step(z, v, 0.5, tp, eta, n).to_vector();
  auto z0 = v_split(z, v, 0.5).z0.to_vector();
  for (size_t i = 0; i < 2; ++i) EXPECT_NEAR(out[i], NoiseSchedule::alpha(tp) * z0[i], 1e-6);
}

TEST(Ddim, NegativeRadicalNamesQuantities) {
  try {
    ddim_step(Tensor::zeros({1}), Tensor::zeros({1}), 0.5, 0.25, 0.9, Tensor::zeros({1}));
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("eta_t"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("sigma(t_prev)"), std::string::npos);
  }
}

TEST(ForwardDiffuse, BoundariesAndVariance) {
  std::mt19937_64 rng(9);
  Tensor z0 = random_tensor({6}, rng), n = random_tensor({6}, rng);
  EXPECT_EQ(forward_diffuse(z0, 0.0, n).to_vector(), z0.to_vector());
  EXPECT_EQ(forward_diffuse(z0, 1.0, n).to_vector(), n.to_vector());
  Rng r(1);
  Tensor noise = r.normal({100000});
  Tensor zt = forward_diffuse(Tensor::zeros({100000}), 0.5, noise);
  EXPECT_NEAR(variance(zt.data()), 0.5, 0.025);
}

TEST(Renoise, IdentityVarianceAndReduction) {
  std::mt19937_64 rng(10);
  Tensor z = random_tensor({6}, rng), n = random_tensor({6}, rng);
  auto same = renoise(z, 0.4, 0.4, n).to_vector();
  for (size_t i = 0; i < 6; ++i) EXPECT_NEAR(same[i], z.data()[i], 1e-6);
  auto fwd = renoise(z, 0.0, 0.7, n).to_vector();
  auto ref = forward_diffuse(z, 0.7, n).to_vector();
  for (size_t i = 0; i < 6; ++i) EXPECT_NEAR(fwd[i], ref[i], 1e-6);
  Rng r(2);
  Tensor draws = renoise(Tensor::zeros({100000}), 0.3, 0.6, r.normal({100000}));
  const double k = NoiseSchedule::alpha(0.6) / NoiseSchedule::alpha(0.3);
  const double expect = 0.6 - k * k * 0.3;
  EXPECT_NEAR(variance(draws.data()), expect, 0.05 * expect);
  EXPECT_THROW(renoise(z, 1.0, 1.0, n), Error);
}

TEST(Renoise, PreservesScheduleVariance) {
  Rng r(3);
  const int n = 100000;
  Tensor z_prev = forward_diffuse(r.normal({n}), 0.4, r.normal({n}));
  Tensor z_t = renoise(z_prev, 0.4, 0.55, r.normal({n}));
  EXPECT_NEAR(variance(z_t.data()), 1.0, 0.05);
}

TEST(Cfg, Endpoints) {
  Tensor c = Tensor::from({2}, {1, 2}), u = Tensor::from({2}, {-1, 0.5});
  EXPECT_EQ(cfg_combine(c, u, 1.0).to_vector(), c.to_vector());
  EXPECT_EQ(cfg_combine(c, u, 0.0).to_vector(), u.to_vector());
  auto seven = cfg_combine(c, u, 7.0).to_vector();
  EXPECT_NEAR(seven[0], -1 + 7 * 2, 1e-6);
}

TEST(Sampler, GaussianOracleMarginal) {
  GaussianVelocityModel model(0.5, 1.0);
  NoiseSchedule sched(100, 0.0);
  SampleOptions opts;
  opts.cfg_scale = 1.0;
  opts.seed = 42;
  auto res = sample(model, sched, {10000, 1}, opts);
  double m = 0;
  for (real v : res.z0.data()) m += v;
  m /= 10000.0;
  EXPECT_NEAR(m, 0.5, 0.03 * (1 + 0.5));
  EXPECT_NEAR(variance(res.z0.data()), 1.0, 0.05);
}

TEST(Sampler, StochasticGaussianOracleMarginal) {
  GaussianVelocityModel model(-0.5, 1.3);
  SampleOptions opts;
  opts.cfg_scale = 1.0;
  opts.seed = 4;
  auto res = sample(model, NoiseSchedule(100), {10000, 1}, opts);
  double m = 0;
  for (real v : res.z0.data()) m += v;
  m /= 10000.0;
  EXPECT_NEAR(m, -0.5, 0.03 * 1.5);
  EXPECT_NEAR(variance(res.z0.data()), 1.69, 0.05 * 1.69);
}

TEST(Sampler, DeterministicAndHookNeutral) {
  GaussianVelocityModel model(0.1, 0.9);
  NoiseSchedule sched(20);
  SampleOptions opts;
  opts.seed = 77;
  auto a = sample(model, sched, {8, 3}, opts);
  auto b = sample(model, sched, {8, 3}, opts);
  EXPECT_EQ(a.z0.to_vector(), b.z0.to_vector());
  int calls = 0;
  auto c = sample(model, sched, {8, 3}, opts, [&](const StepState&) {
    ++calls;
    return StepOutput{};
  });
  EXPECT_EQ(calls, 20);
  EXPECT_EQ(a.z0.to_vector(), c.z0.to_vector());
  auto d = sample(model, sched, {8, 3}, opts, [&](const StepState& s) { return plain_step(model, 0, 7.0, s); });
  EXPECT_EQ(a.z0.to_vector(), d.z0.to_vector());
  opts.seed = 78;
  EXPECT_NE(sample(model, sched, {8, 3}, opts).z0.to_vector(), a.z0.to_vector());
}

TEST(Sampler, DeterministicWithoutEtaGivenInitialNoise) {
  GaussianVelocityModel model(0.0, 1.0);
  NoiseSchedule sched(10, 0.0);
  SampleOptions opts;
  opts.seed = 5;
  opts.record = true;
  auto a = sample(model, sched, {4, 2}, opts);
  ASSERT_EQ(a.states.size(), 11u);
  // Replaying from the same initial state with different step noise gives
  // the same output when eta is zero.
  Tensor z = a.states[0];
  for (int k = 0; k < 10; ++k) {
    StepState s;
    s.t = sched.time(k);
    s.t_prev = sched.prev_time(k);
    s.eta = 0;
    s.z_t = z;
    s.noise = Rng(999 + k).normal({4, 2});
    z = plain_step(model, 0, 7.0, s).z_prev;
  }
  EXPECT_EQ(z.to_vector(), a.z0.to_vector());
}

TEST(Trajectory, RoundTrip) {
  GaussianVelocityModel model(0.0, 1.0);
  NoiseSchedule sched(5);
  SampleOptions opts;
  opts.record = true;
  auto res = sample(model, sched, {6, 2}, opts);
  std::stringstream ss;
  write_trajectory(ss, 5, res.states);
  int steps = 0;
  auto back = read_trajectory(ss, &steps);
  EXPECT_EQ(steps, 5);
  ASSERT_EQ(back.size(), 6u);
  for (size_t i = 0; i < back.size(); ++i) EXPECT_EQ(back[i].to_vector(), res.states[i].to_vector());
}

}  // namespace
}  // namespace latchkit
