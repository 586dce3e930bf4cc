#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "latchkit/guidance.hpp"
#include "test_util.hpp"

namespace latchkit {
namespace {

using testing::random_tensor;

int count(const std::vector<bool>& m) { return int(std::count(m.begin(), m.end(), true)); }

TEST(Mask, FrontFraction) {
  auto m = make_mask(100, 0.2);
  ASSERT_EQ(m.size(), 100u);
  EXPECT_EQ(count(m), 20);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(m[size_t(i)], i < 20);
  EXPECT_EQ(count(make_mask(10, 0.0)), 0);
  EXPECT_EQ(count(make_mask(10, 1.0)), 10);
  EXPECT_EQ(count(make_mask(7, 0.5)), 4);
  EXPECT_THROW(make_mask(10, -0.1), InvalidArgument);
  EXPECT_THROW(make_mask(10, 1.5), InvalidArgument);
  EXPECT_THROW(make_mask(0, 0.5), InvalidArgument);
}

TEST(Mask, ExplicitSteps) {
  auto m = make_mask(10, std::vector<int>{0, 3, 9});
  EXPECT_EQ(count(m), 3);
  EXPECT_TRUE(m[0] && m[3] && m[9]);
  EXPECT_THROW(make_mask(10, std::vector<int>{10}), InvalidArgument);
  EXPECT_THROW(make_mask(10, std::vector<int>{-1}), InvalidArgument);
}

TEST(Config, BackendDefaults) {
  auto l = GuidanceConfig::defaults(Backend::kLatch);
  EXPECT_DOUBLE_EQ(l.rho, 0.03);
  EXPECT_DOUBLE_EQ(l.mu, 0.03);
  EXPECT_DOUBLE_EQ(l.gamma, 0.3);
  EXPECT_EQ(l.n_iter, 4);
  EXPECT_EQ(l.n_recur, 1);
  EXPECT_DOUBLE_EQ(l.cfg_scale, 7.0);
  EXPECT_EQ(count(l.mask), 20);
  EXPECT_DOUBLE_EQ(l.weight(ControlKind::kIntensity), 0.0005);
  EXPECT_DOUBLE_EQ(l.weight(ControlKind::kBeats), 1.0);
  auto e = GuidanceConfig::defaults(Backend::kEndToEnd);
  EXPECT_DOUBLE_EQ(e.gamma, 1.5);
  EXPECT_DOUBLE_EQ(e.weight(ControlKind::kIntensity), 0.001);
  auto r = GuidanceConfig::defaults(Backend::kReadout);
  EXPECT_DOUBLE_EQ(r.rho, 0.1);
  EXPECT_DOUBLE_EQ(r.mu, 0.0);
  EXPECT_DOUBLE_EQ(r.weight(ControlKind::kIntensity), 0.005);
}

TEST(Config, FromFileAndValidation) {
  Config c = Config::parse(
      "[guidance]\nbackend = end_to_end\nrho = 0.5\nn_iter = 2\nmask_fraction = 0.5\nweight_beats = 2\n"
      "[sampler]\ncfg_scale = 3\n");
  auto g = GuidanceConfig::from(c, 10);
  EXPECT_EQ(g.backend, Backend::kEndToEnd);
  EXPECT_DOUBLE_EQ(g.rho, 0.5);
  EXPECT_DOUBLE_EQ(g.mu, 0.03);
  EXPECT_DOUBLE_EQ(g.gamma, 1.5);
  EXPECT_EQ(g.n_iter, 2);
  EXPECT_EQ(count(g.mask), 5);
  EXPECT_DOUBLE_EQ(g.cfg_scale, 3.0);
  EXPECT_DOUBLE_EQ(g.weight(ControlKind::kBeats), 2.0);
  EXPECT_THROW(GuidanceConfig::from(Config::parse("[guidance]\nrho = -1\n"), 10), InvalidArgument);
  EXPECT_THROW(GuidanceConfig::from(Config::parse("[guidance]\nn_recur = 0\n"), 10), InvalidArgument);
  EXPECT_THROW(GuidanceConfig::from(Config::parse("[guidance]\nbackend = magic\n"), 10), InvalidArgument);
  EXPECT_THROW(GuidanceConfig::from(Config::parse("[guidance]\nmask_steps = 0, 12\n"), 10), InvalidArgument);
  auto explicit_steps = GuidanceConfig::from(Config::parse("[guidance]\nmask_steps = 1, 4\n"), 10);
  EXPECT_EQ(count(explicit_steps.mask), 2);
  EXPECT_TRUE(explicit_steps.mask[1] && explicit_steps.mask[4]);
}

TEST(Descend, QuadraticToy) {
  auto quad = [](const Tensor& z) { return ops::sum(ops::square(z)); };
  Tensor z = descend(Tensor::full({1}, 1), quad, 0.1, 1);
  EXPECT_NEAR(z.data()[0], 0.8, 1e-7);
  Tensor z2 = descend(Tensor::full({1}, 1), quad, 0.1, 3);
  EXPECT_NEAR(z2.data()[0], 0.8 * 0.8 * 0.8, 1e-6);
  Tensor z0 = descend(Tensor::full({1}, 1), quad, 0.0, 4);
  EXPECT_EQ(z0.data()[0], real(1));
}

// Heads whose output layer is a constant, so losses have closed forms.
struct ConstantHeads {
  LatchHead loud{ControlKind::kIntensity, NoiseMode::kClean, 1};
  LatchHead beats{ControlKind::kBeats, NoiseMode::kClean, 2};

  ConstantHeads(real loud_value, real beats_logit) {
    set(loud, loud_value);
    set(beats, beats_logit);
  }
  static void set(LatchHead& h, real value) {
    for (auto& x : h.params().get("out.w").mutable_data()) x = 0;
    for (auto& x : h.params().get("out.b").mutable_data()) x = value;
  }
  GuidanceModels models() const {
    GuidanceModels m;
    m.latch = {{ControlKind::kIntensity, &loud}, {ControlKind::kBeats, &beats}};
    return m;
  }
};

TEST(ControlLoss, ZeroAtTarget) {
  ConstantHeads heads(-20, 0);
  auto cfg = GuidanceConfig::defaults(Backend::kLatch, 10);
  Rng rng(1);
  std::mt19937_64 g(1);
  Tensor z = random_tensor({16, kLatentChannels}, g);
  auto loss = control_loss(heads.models(), cfg, z, 0.5, {{ControlKind::kIntensity, Tensor::full({16, 1}, -20), 1}},
                           0.0, rng);
  EXPECT_NEAR(loss.total.item(), 0.0, 1e-10);
}

TEST(ControlLoss, WeightedMeanOverControls) {
  // Intensity: constant 0 vs target sqrt(0.2) -> MSE 0.2. Beats: logit x with
  // softplus(x) = 0.4 vs target 0 -> BCE 0.4.
  ConstantHeads heads(0, real(std::log(std::exp(0.4) - 1)));
  auto cfg = GuidanceConfig::defaults(Backend::kLatch, 10);
  Rng rng(1);
  Tensor z = Tensor::zeros({16, kLatentChannels});
  std::vector<ControlTarget> targets{{ControlKind::kIntensity, Tensor::full({16, 1}, real(std::sqrt(0.2))), 1},
                                     {ControlKind::kBeats, Tensor::zeros({16, 1}), 1}};
  auto loss = control_loss(heads.models(), cfg, z, 0.5, targets, 0.0, rng);
  EXPECT_NEAR(loss.per_control.at(ControlKind::kIntensity), 0.2, 1e-6);
  EXPECT_NEAR(loss.per_control.at(ControlKind::kBeats), 0.4, 1e-6);
  EXPECT_NEAR(loss.total.item(), 0.3, 1e-6);
  targets[0].weight = 3;
  EXPECT_NEAR(control_loss(heads.models(), cfg, z, 0.5, targets, 0.0, rng).total.item(), 0.25, 1e-6);
  cfg.reduction = LossReduction::kSum;
  EXPECT_NEAR(control_loss(heads.models(), cfg, z, 0.5, targets, 0.0, rng).total.item(), 16 * 0.25, 1e-4);
}

TEST(ControlLoss, Errors) {
  ConstantHeads heads(0, 0);
  auto cfg = GuidanceConfig::defaults(Backend::kLatch, 10);
  Rng rng(1);
  Tensor z = Tensor::zeros({16, kLatentChannels});
  EXPECT_THROW(control_loss(heads.models(), cfg, z, 0.5, {}, 0.0, rng), InvalidArgument);
  EXPECT_THROW(control_loss(heads.models(), cfg, z, 0.5, {{ControlKind::kBeats, Tensor::zeros({15, 1}), 1}}, 0.0, rng),
               ShapeError);
  EXPECT_THROW(control_loss(heads.models(), cfg, z, 0.5, {{ControlKind::kPitch, Tensor::zeros({16, 16}), 1}}, 0.0, rng),
               MissingPrerequisite);
}

TEST(ControlLoss, SmoothingDrawsAreSeeded) {
  ConstantHeads heads(-20, 0);
  auto cfg = GuidanceConfig::defaults(Backend::kLatch, 10);
  Tensor z = Tensor::zeros({16, kLatentChannels});
  std::vector<ControlTarget> targets{{ControlKind::kIntensity, Tensor::full({16, 1}, -20), 1}};
  Rng a(3), b(3);
  const double la = control_loss(heads.models(), cfg, z, 0.5, targets, 0.25, a).total.item();
  const double lb = control_loss(heads.models(), cfg, z, 0.5, targets, 0.25, b).total.item();
  EXPECT_EQ(la, lb);
  // Mean of squared N(0, 0.25) noise over 16 frames.
  EXPECT_GT(la, 0.0);
  EXPECT_LT(la, 1.0);
}

TEST(MeanGuidance, ZeroStrengthAndReadout) {
  ConstantHeads heads(-10, 1);
  auto cfg = GuidanceConfig::defaults(Backend::kLatch, 10);
  std::mt19937_64 g(2);
  Tensor z = random_tensor({16, kLatentChannels}, g);
  Rng rng(0);
  std::vector<ControlTarget> targets{{ControlKind::kBeats, Tensor::zeros({16, 1}), 1}};
  Tensor same = mean_guidance(heads.models(), cfg, z, 0.5, targets, 0.0, 0.0, rng);
  for (size_t i = 0; i < same.data().size(); ++i) EXPECT_EQ(same.data()[i], z.data()[i]);

  auto rcfg = GuidanceConfig::defaults(Backend::kReadout, 10);
  const auto before = readout_mean_guidance_calls().load();
  EXPECT_THROW(mean_guidance(heads.models(), rcfg, z, 0.5, targets, 0.1, 0.0, rng), InvalidArgument);
  EXPECT_EQ(readout_mean_guidance_calls().load(), before + 1);
  readout_mean_guidance_calls() = 0;
}

TEST(MeanGuidance, ReducesLoss) {
  LatchHead head(ControlKind::kBeats, NoiseMode::kClean, 4);
  GuidanceModels m;
  m.latch[ControlKind::kBeats] = &head;
  auto cfg = GuidanceConfig::defaults(Backend::kLatch, 10);
  cfg.n_iter = 10;
  std::mt19937_64 g(3);
  Tensor z = random_tensor({16, kLatentChannels}, g);
  std::vector<ControlTarget> targets{{ControlKind::kBeats, random_tensor({16, 1}, g, 0, 1), 1}};
  Rng rng(0);
  const double before = control_loss(m, cfg, z, 0.5, targets, 0.0, rng).total.item();
  Tensor z2 = mean_guidance(m, cfg, z, 0.5, targets, 0.5, 0.0, rng);
  EXPECT_LT(control_loss(m, cfg, z2, 0.5, targets, 0.0, rng).total.item(), before);
}

// With the output layer zeroed, the denoiser predicts a constant v = b, so
// z0_hat = alpha z - sigma b and the gradient w.r.t. z_t is alpha times the
// gradient w.r.t. z0_hat.
TEST(VarianceGuidance, ChainRuleOnLinearStandIn) {
  Denoiser den(3);
  for (auto& x : den.params().get("out.w").mutable_data()) x = 0;
  std::mt19937_64 g(4);
  {
    auto b = den.params().get("out.b").mutable_data();
    for (auto& x : b) x = real(std::uniform_real_distribution<double>(-1, 1)(g));
  }
  LatchHead head(ControlKind::kBeats, NoiseMode::kBackward, 5);
  GuidanceModels m;
  m.denoiser = &den;
  m.latch[ControlKind::kBeats] = &head;
  auto cfg = GuidanceConfig::defaults(Backend::kLatch, 10);
  const double t = 0.64;
  Tensor z = random_tensor({8, kLatentChannels}, g);
  std::vector<ControlTarget> targets{{ControlKind::kBeats, random_tensor({8, 1}, g, 0, 1), 1}};
  Rng rng(0);
  VarianceGradient vg = variance_gradient(m, cfg, z, t, 1, targets, 0.0, rng);

  const auto [alpha, sigma] = NoiseSchedule::at(t);
  Tensor bias = den.params().get("out.b");
  std::vector<real> z0v(size_t(z.numel()));
  for (size_t i = 0; i < z0v.size(); ++i)
    z0v[i] = real(alpha * z.data()[i] - sigma * bias.data()[i % kLatentChannels]);
  Tensor z0 = Tensor::from(z.shape(), z0v);
  z0.set_requires_grad(true);
  Graph graph;
  graph.backward(control_loss(m, cfg, z0, t, targets, 0.0, rng).total);
  double num = 0, den2 = 0;
  for (size_t i = 0; i < z0v.size(); ++i) {
    const double expect = alpha * z0.grad()[i];
    num += (vg.grad.data()[i] - expect) * (vg.grad.data()[i] - expect);
    den2 += expect * expect;
  }
  ASSERT_GT(den2, 0.0);
  EXPECT_LT(std::sqrt(num / den2), 1e-5);
}

TEST(StepWeights, DoublingRhoAndNormalizerCancels) {
  NoiseSchedule sched(100);
  StepWeights s(sched), half(sched, 2.0);
  const double rho = 0.03;
  for (int k = 0; k <= 100; ++k) EXPECT_EQ((2 * rho) * half[k], rho * s[k]);
}

// A tiny untrained stack: parameters are fixed by seed, which is all the
// neutrality and bookkeeping properties need.
struct Stack {
  Vae vae{1};
  Denoiser den{2};
  LatchHead latch{ControlKind::kBeats, NoiseMode::kBackward, 3};
  ReadoutHead readout{ControlKind::kBeats, 4};
  NoiseSchedule sched{10};
  Tensor target;

  Stack() {
    vae.set_trained(true);
    std::mt19937_64 g(5);
    target = random_tensor({kFrames, 1}, g, 0, 1);
  }
  GuidanceModels models() const {
    GuidanceModels m;
    m.denoiser = &den;
    m.vae = &vae;
    m.latch[ControlKind::kBeats] = &latch;
    m.readout[ControlKind::kBeats] = &readout;
    return m;
  }
  std::vector<ControlTarget> targets() const { return {{ControlKind::kBeats, target, 1}}; }
};

void expect_identical(const Tensor& a, const Tensor& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (size_t i = 0; i < a.data().size(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]) << "element " << i;
}

TEST(Neutrality, AllBackends) {
  Stack s;
  const auto base = guided_sample(s.models(), GuidanceConfig::defaults(Backend::kLatch, 10), {}, s.sched, 1, 9).z0;
  for (auto backend : {Backend::kLatch, Backend::kEndToEnd, Backend::kReadout}) {
    SCOPED_TRACE(backend_name(backend));
    auto off = GuidanceConfig::defaults(backend, 10);
    off.mask = make_mask(10, 0.0);
    auto r = guided_sample(s.models(), off, s.targets(), s.sched, 1, 9);
    EXPECT_EQ(r.guided_steps, 0);
    expect_identical(r.z0, base);

    auto zero = GuidanceConfig::defaults(backend, 10);
    zero.mask = make_mask(10, 1.0);
    zero.rho = zero.mu = zero.gamma = 0;
    auto z = guided_sample(s.models(), zero, s.targets(), s.sched, 1, 9);
    EXPECT_EQ(z.guided_steps, 10);
    EXPECT_EQ(z.diagnostics.size(), 10u);
    expect_identical(z.z0, base);
  }
}

TEST(Guided, StrengthChangesOutputDeterministically) {
  Stack s;
  auto cfg = GuidanceConfig::defaults(Backend::kLatch, 10);
  cfg.rho = cfg.mu = 30;
  auto a = guided_sample(s.models(), cfg, s.targets(), s.sched, 0, 4);
  auto b = guided_sample(s.models(), cfg, s.targets(), s.sched, 0, 4);
  expect_identical(a.z0, b.z0);
  const auto base = guided_sample(s.models(), cfg, {}, s.sched, 0, 4).z0;
  double diff = 0;
  for (size_t i = 0; i < base.data().size(); ++i) diff += std::abs(a.z0.data()[i] - base.data()[i]);
  EXPECT_GT(diff, 0.0);
  EXPECT_EQ(a.guided_steps, 2);
  ASSERT_EQ(a.diagnostics.size(), 2u);
  EXPECT_EQ(a.diagnostics[0].step, 0);
  EXPECT_EQ(a.diagnostics[1].step, 1);
}

TEST(Guided, RecurrenceRuns) {
  Stack s;
  auto cfg = GuidanceConfig::defaults(Backend::kLatch, 10);
  cfg.n_recur = 3;
  cfg.rho = 1;
  auto r = guided_sample(s.models(), cfg, s.targets(), s.sched, 2, 6);
  EXPECT_EQ(r.guided_steps, 2);
  for (real v : r.z0.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Guided, ReadoutNeverTakesMeanPath) {
  Stack s;
  readout_mean_guidance_calls() = 0;
  auto cfg = GuidanceConfig::defaults(Backend::kReadout, 10);
  cfg.mu = 0.5;  // ignored for readouts
  cfg.mask = make_mask(10, 1.0);
  auto r = guided_sample(s.models(), cfg, s.targets(), s.sched, 0, 3);
  EXPECT_EQ(r.guided_steps, 10);
  EXPECT_EQ(readout_mean_guidance_calls().load(), 0);
}

TEST(Guided, FrameMismatchIsRejected) {
  Stack s;
  auto cfg = GuidanceConfig::defaults(Backend::kLatch, 10);
  EXPECT_THROW(guided_sample(s.models(), cfg, {{ControlKind::kBeats, Tensor::zeros({100, 1}), 1}}, s.sched, 0, 3),
               ShapeError);
}

TEST(Guided, DiagnosticsCsv) {
  const auto path = (std::filesystem::temp_directory_path() / "latchkit_guidance.csv").string();
  GuidanceDiag d{0, 1.0, {{ControlKind::kBeats, 0.5}}, 0.5};
  write_guidance_csv(path, {{d}, {d, d}});
  std::ifstream is(path);
  std::string text{std::istreambuf_iterator<char>(is), {}};
  EXPECT_EQ(text, "run,step,t,total,intensity,pitch,beats\n0,0,1,0.5,,,0.5\n1,0,1,0.5,,,0.5\n1,0,1,0.5,,,0.5\n");
  std::filesystem::remove(path);
}

TEST(Guided, MakeTargetsUsesConfigWeights) {
  auto cfg = GuidanceConfig::defaults(Backend::kLatch, 10);
  auto t = make_targets(cfg, {{ControlKind::kIntensity, Tensor::zeros({4, 1})}, {ControlKind::kBeats, Tensor::zeros({4, 1})}});
  ASSERT_EQ(t.size(), 2u);
  EXPECT_DOUBLE_EQ(t[0].weight, 0.0005);
  EXPECT_DOUBLE_EQ(t[1].weight, 1.0);
}

}  // namespace
}  // namespace latchkit
