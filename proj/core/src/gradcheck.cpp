#include "latchkit/gradcheck.hpp"

#include <functional>
#include <random>

#include "latchkit/guidance.hpp"
#include "latchkit/models.hpp"
#include "latchkit/ops.hpp"
#include "latchkit/world.hpp"

LATCHKIT_BEGIN_NAMESPACE
namespace {

static_assert(sizeof(real) == 8, "gradient checks need the double-precision build");

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<real> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Weighted sum with fixed random weights so every output element carries an
// O(1) gradient.
Tensor probe(const Tensor& y, uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(y.shape(), rng, 0.5, 1.5);
  return ops::sum(ops::mul(y, w));
}

const std::vector<std::string> kPrimitives = {"add", "add_rhs", "sub", "mul", "mul_rhs", "div", "div_rhs", "exp",
                                           "log", "sqrt", "pow", "sigmoid", "tanh", "gelu", "abs", "clamp",
                                           "matmul", "bmm", "sum_axis", "mean_axis", "mean", "max_last",
                                           "softmax", "layer_norm", "layer_norm_gamma", "concat", "slice",
                                           "transpose", "swap01", "reshape", "gather", "conv1d",
                                           "conv1d_input", "conv_transpose1d", "conv_transpose1d_input",
                                           "bce_logits", "bce_prob"};

const std::vector<std::string> kComposites = {"vae_decode", "denoiser", "latch_head", "readout_head",
                                              "extract_intensity", "extract_pitch", "extract_beats",
                                              "guidance_latch", "guidance_end_to_end", "guidance_readout"};

GradCheck primitive(const std::string& name) {
  std::mt19937_64 rng(1234);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  Tensor row = random_tensor({4}, rng);
  Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0);
  std::function<Tensor(const Tensor&)> f;
  Tensor leaf = a;
  if (name == "add") f = [&](const Tensor& v) { return probe(ops::add(v, row)); };
  if (name == "add_rhs") { leaf = row; f = [&](const Tensor& v) { return probe(ops::add(a, v)); }; }
  if (name == "sub") f = [&](const Tensor& v) { return probe(ops::sub(b, v)); };
  if (name == "mul") f = [&](const Tensor& v) { return probe(ops::mul(v, b)); };
  if (name == "mul_rhs") { leaf = row; f = [&](const Tensor& v) { return probe(ops::mul(a, v)); }; }
  if (name == "div") f = [&](const Tensor& v) { return probe(ops::div(v, pos)); };
  if (name == "div_rhs") { leaf = pos; f = [&](const Tensor& v) { return probe(ops::div(a, v)); }; }
  if (name == "exp") f = [&](const Tensor& v) { return probe(ops::exp(v)); };
  if (name == "log") { leaf = pos; f = [&](const Tensor& v) { return probe(ops::log(v)); }; }
  if (name == "sqrt") { leaf = pos; f = [&](const Tensor& v) { return probe(ops::sqrt(v)); }; }
  if (name == "pow") { leaf = pos; f = [&](const Tensor& v) { return probe(ops::pow(v, 1.7)); }; }
  if (name == "sigmoid") f = [&](const Tensor& v) { return probe(ops::sigmoid(v)); };
  if (name == "tanh") f = [&](const Tensor& v) { return probe(ops::tanh(v)); };
  if (name == "gelu") f = [&](const Tensor& v) { return probe(ops::gelu(v)); };
  if (name == "abs") f = [&](const Tensor& v) { return probe(ops::abs(v)); };
  if (name == "clamp") f = [&](const Tensor& v) { return probe(ops::clamp(v, -1.0, 1.0)); };
  if (name == "matmul") f = [&](const Tensor& v) { return probe(ops::matmul(v, ops::transpose(b))); };
  if (name == "bmm") {
    leaf = random_tensor({2, 3, 4}, rng);
    Tensor rhs = random_tensor({2, 4, 5}, rng);
    f = [rhs](const Tensor& v) { return probe(ops::matmul(v, rhs)); };
  }
  if (name == "sum_axis") f = [&](const Tensor& v) { return probe(ops::sum(v, 0)); };
  if (name == "mean_axis") f = [&](const Tensor& v) { return probe(ops::mean(v, 1, true)); };
  if (name == "mean") f = [&](const Tensor& v) { return ops::mean(ops::mul(v, b)); };
  if (name == "max_last") f = [&](const Tensor& v) { return probe(ops::max_last(v)); };
  if (name == "softmax") f = [&](const Tensor& v) { return probe(ops::softmax(v)); };
  if (name == "layer_norm") {
    Tensor gamma = random_tensor({4}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({4}, rng);
    f = [gamma, beta](const Tensor& v) { return probe(ops::layer_norm(v, gamma, beta)); };
  }
  if (name == "layer_norm_gamma") {
    leaf = random_tensor({4}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({4}, rng);
    f = [&, beta](const Tensor& v) { return probe(ops::layer_norm(a, v, beta)); };
  }
  if (name == "concat") f = [&](const Tensor& v) { return probe(ops::concat({b, v, b}, 1)); };
  if (name == "slice") f = [&](const Tensor& v) { return probe(ops::slice(v, 1, 1, 3)); };
  if (name == "transpose") f = [&](const Tensor& v) { return probe(ops::transpose(v)); };
  if (name == "swap01") {
    leaf = random_tensor({2, 3, 4}, rng);
    f = [](const Tensor& v) { return probe(ops::swap01(v)); };
  }
  if (name == "reshape") f = [&](const Tensor& v) { return probe(ops::reshape(v, {2, 6})); };
  if (name == "gather") f = [&](const Tensor& v) { return probe(ops::gather(v, {0, 5, -1, 11, 5}, {5})); };
  if (name == "conv1d") {
    Tensor x = random_tensor({12, 3}, rng);
    leaf = random_tensor({3, 3, 2}, rng);
    Tensor bias = random_tensor({2}, rng);
    f = [x, bias](const Tensor& w) { return probe(ops::conv1d(x, w, bias, {2, 1, 2})); };
  }
  if (name == "conv1d_input") {
    leaf = random_tensor({12, 3}, rng);
    Tensor w = random_tensor({3, 3, 2}, rng);
    f = [w](const Tensor& x) { return probe(ops::conv1d(x, w, Tensor(), {2, 1, 2})); };
  }
  if (name == "conv_transpose1d") {
    Tensor x = random_tensor({5, 3}, rng);
    leaf = random_tensor({4, 3, 2}, rng);
    f = [x](const Tensor& w) { return probe(ops::conv_transpose1d(x, w, Tensor(), {2, 1, 1})); };
  }
  if (name == "conv_transpose1d_input") {
    leaf = random_tensor({5, 3}, rng);
    Tensor w = random_tensor({4, 3, 2}, rng);
    Tensor bias = random_tensor({2}, rng);
    f = [w, bias](const Tensor& x) { return probe(ops::conv_transpose1d(x, w, bias, {2, 1, 1})); };
  }
  if (name == "bce_logits") {
    Tensor target = random_tensor({3, 4}, rng, 0.0, 1.0);
    f = [target](const Tensor& v) { return ops::bce_with_logits(v, target); };
  }
  if (name == "bce_prob") {
    leaf = random_tensor({3, 4}, rng, 0.1, 0.9);
    Tensor target = random_tensor({3, 4}, rng, 0.0, 1.0);
    f = [target](const Tensor& v) { return ops::bce_prob(v, target); };
  }
  if (!f) throw InvalidArgument("unknown gradient check " + name);
  return {name, finite_diff_check(f, leaf, 1e-3), 1e-4};
}

// Extractors see a full clip; the leaf is a small coefficient vector along
// fixed random waveform directions, so each difference costs one extraction.
GradCheck extractor(const std::string& name, ControlKind kind) {
  WorldSpec spec;
  spec.envelope = {0.1, 0.2, 0.15};
  spec.pitches = {3, 9};
  spec.bpm = 100;
  spec.beat_phase = 0.2;
  Clip clip = synth(spec);
  Tensor base = Tensor::from({1, kSamples}, clip.samples);
  std::mt19937_64 rng(21);
  Tensor dirs = random_tensor({6, kSamples}, rng, -0.01, 0.01);
  Tensor leaf = random_tensor({1, 6}, rng, -1.0, 1.0);
  auto f = [&](const Tensor& c) {
    Tensor wave = ops::reshape(ops::add(base, ops::matmul(c, dirs)), {kSamples});
    return probe(extract(kind, wave));
  };
  return {name, finite_diff_check(f, leaf, 1e-3), 1e-3};
}

// Control loss of the clean-latent estimate (or tap) of z_t, through the
// CFG-combined denoiser; the path variance guidance differentiates.
GradCheck guidance(const std::string& name, Backend backend) {
  std::mt19937_64 rng(41);
  Denoiser den(6);
  Vae vae(6);
  vae.set_trained(true);
  LatchHead beats(ControlKind::kBeats, NoiseMode::kBackward, 6);
  LatchHead loud(ControlKind::kIntensity, NoiseMode::kBackward, 7);
  ReadoutHead rbeats(ControlKind::kBeats, 6);
  GuidanceModels models;
  models.denoiser = &den;
  models.vae = &vae;
  models.latch = {{ControlKind::kBeats, &beats}, {ControlKind::kIntensity, &loud}};
  models.readout = {{ControlKind::kBeats, &rbeats}};
  GuidanceConfig cfg = GuidanceConfig::defaults(backend, 10);
  const double t = 0.7;
  const bool full = backend == Backend::kEndToEnd;
  const int64_t frames = full ? kFrames : 8;
  // Extracted beat probabilities are exactly 0 on falling frames, where a
  // positive target makes the loss kink; the end-to-end check uses silence.
  std::vector<ControlTarget> targets{
      {ControlKind::kBeats, full ? Tensor::zeros({frames, 1}) : random_tensor({frames, 1}, rng, 0.0, 1.0), 1.0}};
  if (backend != Backend::kReadout)
    targets.push_back({ControlKind::kIntensity, random_tensor({frames, 1}, rng, -30.0, -10.0), 0.5});
  auto loss = [&](const Tensor& z) {
    Rng unused(0);
    Tensor input;
    if (backend == Backend::kReadout) {
      input = den.forward(z, t, 1).tap;
    } else {
      input = v_split(z, cfg_velocity(den, z, t, 1, cfg.cfg_scale), t).z0;
    }
    return control_loss(models, cfg, input, t, targets, 0.0, unused).total;
  };
  if (!full) {
    Tensor z = random_tensor({frames, kLatentChannels}, rng, -1.0, 1.0);
    return {name, finite_diff_check(loss, z, 1e-3), 1e-3};
  }
  // Decoding needs a full clip: perturb a base latent along fixed directions.
  Tensor base = random_tensor({1, frames * kLatentChannels}, rng, -1.0, 1.0);
  Tensor dirs = random_tensor({4, frames * kLatentChannels}, rng, -0.02, 0.02);
  Tensor leaf = random_tensor({1, 4}, rng, -1.0, 1.0);
  auto f = [&](const Tensor& c) {
    return loss(ops::reshape(ops::add(base, ops::matmul(c, dirs)), {frames, kLatentChannels}));
  };
  return {name, finite_diff_check(f, leaf, 1e-3), 1e-3};
}

GradCheck composite(const std::string& name) {
  std::mt19937_64 rng(31);
  if (name == "vae_decode") {
    Vae vae(5);
    Tensor z = random_tensor({4, kLatentChannels}, rng, -1.0, 1.0);
    auto f = [&](const Tensor& v) { return ops::sum(ops::square(vae.decode_raw(v))); };
    return {name, finite_diff_check(f, z, 1e-3), 1e-3};
  }
  if (name == "denoiser") {
    Denoiser den(5);
    Tensor z = random_tensor({6, kLatentChannels}, rng);
    auto f = [&](const Tensor& v) {
      DenoiseOutput o = den.forward(v, 0.4, 1);
      return ops::add(probe(o.v), probe(o.tap, 7));
    };
    return {name, finite_diff_check(f, z, 1e-3), 1e-3};
  }
  if (name == "latch_head") {
    LatchHead head(ControlKind::kBeats, NoiseMode::kBackward, 5);
    Tensor z = random_tensor({8, kLatentChannels}, rng);
    auto f = [&](const Tensor& v) { return probe(head.predict(v, 0.3)); };
    return {name, finite_diff_check(f, z, 1e-3), 1e-3};
  }
  if (name == "readout_head") {
    ReadoutHead head(ControlKind::kPitch, 5);
    Tensor tap = random_tensor({4, Denoiser::kDim}, rng);
    auto f = [&](const Tensor& v) { return probe(head.predict(v, 0.6)); };
    return {name, finite_diff_check(f, tap, 1e-3), 1e-3};
  }
  if (name == "extract_intensity") return extractor(name, ControlKind::kIntensity);
  if (name == "extract_pitch") return extractor(name, ControlKind::kPitch);
  if (name == "extract_beats") return extractor(name, ControlKind::kBeats);
  if (name == "guidance_latch") return guidance(name, Backend::kLatch);
  if (name == "guidance_end_to_end") return guidance(name, Backend::kEndToEnd);
  if (name == "guidance_readout") return guidance(name, Backend::kReadout);
  throw InvalidArgument("unknown gradient check " + name);
}

}  // namespace

std::vector<std::string> gradient_check_names() {
  std::vector<std::string> all = kPrimitives;
  all.insert(all.end(), kComposites.begin(), kComposites.end());
  return all;
}

GradCheck run_gradient_check(const std::string& name) {
  for (const auto& p : kPrimitives)
    if (p == name) return primitive(name);
  return composite(name);
}

std::vector<GradCheck> run_gradient_checks() {
  std::vector<GradCheck> out;
  for (const auto& n : gradient_check_names()) out.push_back(run_gradient_check(n));
  return out;
}

LATCHKIT_END_NAMESPACE
