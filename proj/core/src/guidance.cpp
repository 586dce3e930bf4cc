#include "latchkit/guidance.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

LATCHKIT_BEGIN_NAMESPACE

const char* backend_name(Backend b) {
  switch (b) {
    case Backend::kLatch: return "latch";
    case Backend::kEndToEnd: return "end_to_end";
    case Backend::kReadout: return "readout";
  }
  return "?";
}

Backend parse_backend(const std::string& name) {
  if (name == "latch") return Backend::kLatch;
  if (name == "end_to_end" || name == "e2e" || name == "end-to-end") return Backend::kEndToEnd;
  if (name == "readout") return Backend::kReadout;
  throw InvalidArgument("unknown backend '" + name + "' (latch, end_to_end, readout)");
}

std::vector<bool> make_mask(int steps, double fraction) {
  if (steps < 1) throw InvalidArgument("mask: T must be at least 1");
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidArgument("mask fraction must lie in [0, 1]");
  // The small slack keeps products like 0.2 * 100 from rounding up.
  const int n = std::min(steps, int(std::ceil(fraction * steps - 1e-9)));
  std::vector<bool> mask(size_t(steps), false);
  for (int i = 0; i < n; ++i) mask[size_t(i)] = true;
  return mask;
}

std::vector<bool> make_mask(int steps, const std::vector<int>& guided_steps) {
  if (steps < 1) throw InvalidArgument("mask: T must be at least 1");
  std::vector<bool> mask(size_t(steps), false);
  for (int s : guided_steps) {
    if (s < 0 || s >= steps) throw InvalidArgument("mask step " + std::to_string(s) + " outside [0, T)");
    mask[size_t(s)] = true;
  }
  return mask;
}

GuidanceConfig GuidanceConfig::defaults(Backend backend, int steps) {
  GuidanceConfig c;
  c.backend = backend;
  c.mask = make_mask(steps, 0.2);
  switch (backend) {
    case Backend::kLatch:
      c.weights[ControlKind::kIntensity] = 0.0005;
      break;
    case Backend::kEndToEnd:
      c.gamma = 1.5;
      c.weights[ControlKind::kIntensity] = 0.001;
      break;
    case Backend::kReadout:
      c.rho = 0.1;
      c.mu = 0.0;
      c.gamma = 0.0;
      c.weights[ControlKind::kIntensity] = 0.005;
      break;
  }
  return c;
}

GuidanceConfig GuidanceConfig::from(const Config& cfg, int steps) {
  GuidanceConfig c = defaults(parse_backend(cfg.get("guidance.backend", std::string("latch"))), steps);
  c.rho = cfg.get("guidance.rho", c.rho);
  c.mu = cfg.get("guidance.mu", c.mu);
  c.gamma = cfg.get("guidance.gamma", c.gamma);
  c.n_iter = cfg.get("guidance.n_iter", c.n_iter);
  c.n_recur = cfg.get("guidance.n_recur", c.n_recur);
  c.cfg_scale = cfg.get("sampler.cfg_scale", c.cfg_scale);
  if (cfg.has("guidance.mask_steps")) {
    std::vector<int> list;
    std::stringstream ss(cfg.get("guidance.mask_steps", std::string()));
    for (std::string item; std::getline(ss, item, ',');)
      if (item.find_first_not_of(" \t") != std::string::npos) {
        try {
          list.push_back(std::stoi(item));
        } catch (const std::exception&) {
          throw InvalidArgument("guidance.mask_steps: '" + item + "' is not a step index");
        }
      }
    c.mask = make_mask(steps, list);
  } else {
    c.mask = make_mask(steps, cfg.get("guidance.mask_fraction", 0.2));
  }
  const std::string red = cfg.get("guidance.loss_reduction", std::string("mean"));
  if (red == "mean") c.reduction = LossReduction::kMean;
  else if (red == "sum") c.reduction = LossReduction::kSum;
  else throw InvalidArgument("guidance.loss_reduction must be mean or sum");
  const std::string gt = cfg.get("guidance.gamma_target", std::string("feature"));
  if (gt == "feature") c.gamma_target = GammaTarget::kFeature;
  else if (gt == "latent") c.gamma_target = GammaTarget::kLatent;
  else throw InvalidArgument("guidance.gamma_target must be feature or latent");
  for (auto kind : {ControlKind::kIntensity, ControlKind::kPitch, ControlKind::kBeats}) {
    const std::string key = std::string("guidance.weight_") + kind_name(kind);
    if (cfg.has(key)) c.weights[kind] = cfg.get(key, 1.0);
  }
  c.validate(steps);
  return c;
}

double GuidanceConfig::weight(ControlKind kind) const {
  auto it = weights.find(kind);
  return it == weights.end() ? 1.0 : it->second;
}

void GuidanceConfig::validate(int steps) const {
  if (rho < 0 || mu < 0 || gamma < 0) throw InvalidArgument("rho, mu and gamma must be non-negative");
  if (n_iter < 1 || n_recur < 1) throw InvalidArgument("n_iter and n_recur must be at least 1");
  if (int(mask.size()) != steps)
    throw InvalidArgument("mask has " + std::to_string(mask.size()) + " entries for " + std::to_string(steps) +
                          " steps");
  for (const auto& [k, w] : weights)
    if (!(w > 0)) throw InvalidArgument("control weights must be positive");
}

std::atomic<int64_t>& readout_mean_guidance_calls() {
  static std::atomic<int64_t> calls{0};
  return calls;
}

ControlLoss control_loss(const GuidanceModels& models, const GuidanceConfig& cfg, const Tensor& input, double t,
                         const std::vector<ControlTarget>& targets, double gamma_t, Rng& rng) {
  if (targets.empty()) throw InvalidArgument("control loss needs at least one target");
  const bool readout = cfg.backend == Backend::kReadout;
  const bool smooth = gamma_t > 0 && !readout;
  const real noise_std = real(std::sqrt(std::max(gamma_t, 0.0)));
  Tensor x = input;
  if (smooth && cfg.gamma_target == GammaTarget::kLatent) x = ops::add(x, ops::scale(rng.normal(x.shape()), noise_std));
  Tensor wave;
  if (cfg.backend == Backend::kEndToEnd) {
    if (!models.vae) throw MissingPrerequisite("vae", "end-to-end guidance needs the autoencoder");
    wave = models.vae->decode(x);
  }
  ControlLoss out;
  Tensor acc;
  double wsum = 0;
  for (const auto& target : targets) {
    Tensor pred;
    switch (cfg.backend) {
      case Backend::kLatch: {
        auto it = models.latch.find(target.kind);
        if (it == models.latch.end() || !it->second)
          throw MissingPrerequisite("latch", std::string("no latent-control head for ") + kind_name(target.kind));
        const LatchHead& head = *it->second;
        pred = head.mode() == NoiseMode::kClean ? head.predict(x) : head.predict(x, t);
        break;
      }
      case Backend::kEndToEnd:
        pred = extract(target.kind, wave);
        break;
      case Backend::kReadout: {
        auto it = models.readout.find(target.kind);
        if (it == models.readout.end() || !it->second)
          throw MissingPrerequisite("readout", std::string("no readout head for ") + kind_name(target.kind));
        pred = it->second->predict(x, t);
        break;
      }
    }
    if (pred.shape() != target.values.shape())
      throw ShapeError(std::string(kind_name(target.kind)) + " target " + to_string(target.values.shape()) +
                       " does not match prediction " + to_string(pred.shape()));
    if (smooth && cfg.gamma_target == GammaTarget::kFeature)
      pred = ops::add(pred, ops::scale(rng.normal(pred.shape()), noise_std));
    Tensor el;
    if (target.kind == ControlKind::kIntensity) el = ops::square(ops::sub(pred, target.values));
    else if (cfg.backend == Backend::kEndToEnd) el = ops::bce_prob_elementwise(pred, target.values);
    else el = ops::bce_with_logits_elementwise(pred, target.values);
    Tensor d = cfg.reduction == LossReduction::kMean ? ops::mean(el) : ops::sum(el);
    out.per_control[target.kind] = d.item();
    const double w = target.weight;
    Tensor wd = ops::scale(d, real(w));
    acc = acc.defined() ? ops::add(acc, wd) : wd;
    wsum += w;
  }
  out.total = ops::scale(acc, real(1.0 / wsum));
  return out;
}

Tensor descend(const Tensor& z0, const std::function<Tensor(const Tensor&)>& loss, double step, int n_iter) {
  Tensor z = z0.detach();
  for (int i = 0; i < n_iter; ++i) {
    z.set_requires_grad(true);
    Graph g;
    g.backward(loss(z));
    Tensor grad = Tensor::from(z.shape(), std::vector<real>(z.grad().begin(), z.grad().end()));
    NoGradGuard ng;
    z = ops::sub(z.detach(), ops::scale(grad, real(step))).detach();
  }
  return z;
}

namespace {

struct Forward {
  Tensor v;    // CFG-combined velocity
  Tensor tap;  // conditional branch activation
};

// Mirrors cfg_velocity so that unguided and guided paths agree bit for bit.
Forward denoise(const Denoiser& den, const Tensor& z, double t, int class_id, double w, bool need_tap) {
  DenoiseOutput c = den.forward(z, t, class_id);
  Forward f;
  f.tap = need_tap ? c.tap : Tensor();
  if (w == 1.0) {
    f.v = c.v;
  } else {
    Tensor vu = den.velocity(z, t, den.null_class());
    f.v = cfg_combine(c.v, vu, w);
  }
  return f;
}

Tensor mean_guidance_impl(const GuidanceModels& models, const GuidanceConfig& cfg, const Tensor& z0_hat, double t,
                          const std::vector<ControlTarget>& targets, double mu_t, double gamma_t, Rng& rng,
                          ControlLoss* first) {
  if (cfg.backend == Backend::kReadout) {
    ++readout_mean_guidance_calls();
    throw InvalidArgument("mean guidance is undefined for readout heads");
  }
  bool seen = false;
  return descend(
      z0_hat,
      [&](const Tensor& z) {
        ControlLoss loss = control_loss(models, cfg, z, t, targets, gamma_t, rng);
        if (!seen && first) *first = loss;
        seen = true;
        return loss.total;
      },
      mu_t, cfg.n_iter);
}

}  // namespace

Tensor mean_guidance(const GuidanceModels& models, const GuidanceConfig& cfg, const Tensor& z0_hat, double t,
                     const std::vector<ControlTarget>& targets, double mu_t, double gamma_t, Rng& rng) {
  return mean_guidance_impl(models, cfg, z0_hat, t, targets, mu_t, gamma_t, rng, nullptr);
}

VarianceGradient variance_gradient(const GuidanceModels& models, const GuidanceConfig& cfg, const Tensor& z_t,
                                   double t, int class_id, const std::vector<ControlTarget>& targets, double gamma_t,
                                   Rng& rng) {
  if (!models.denoiser) throw MissingPrerequisite("denoiser", "variance guidance needs the denoiser");
  Tensor z = z_t.detach();
  z.set_requires_grad(true);
  Graph g;
  const bool readout = cfg.backend == Backend::kReadout;
  Forward f = denoise(*models.denoiser, z, t, class_id, cfg.cfg_scale, readout);
  Tensor input = readout ? f.tap : v_split(z, f.v, t).z0;
  VarianceGradient out;
  out.loss = control_loss(models, cfg, input, t, targets, gamma_t, rng);
  g.backward(out.loss.total);
  out.grad = Tensor::from(z.shape(), std::vector<real>(z.grad().begin(), z.grad().end()));
  return out;
}

GuidedSampler::GuidedSampler(GuidanceModels models, GuidanceConfig cfg, std::vector<ControlTarget> targets,
                             const NoiseSchedule& sched, int class_id)
    : models_(std::move(models)),
      cfg_(std::move(cfg)),
      targets_(std::move(targets)),
      weights_(sched),
      class_id_(class_id) {
  cfg_.validate(sched.steps());
  if (!models_.denoiser) throw MissingPrerequisite("denoiser", "guided sampling needs the denoiser");
  for (const auto& t : targets_)
    if (!(t.weight > 0)) throw InvalidArgument("control weights must be positive");
}

StepOutput GuidedSampler::step(const StepState& s) {
  if (!cfg_.mask.at(size_t(s.step))) return {};
  ++guided_;
  const auto start = std::chrono::steady_clock::now();
  const bool readout = cfg_.backend == Backend::kReadout;
  const double w = weights_[s.step];
  const double rho_t = cfg_.rho * w;
  const double mu_t = readout ? 0.0 : cfg_.mu * w;
  const double gamma_t = readout ? 0.0 : cfg_.gamma * w;
  const Denoiser& den = *models_.denoiser;
  Rng& aux = *s.aux;

  GuidanceDiag diag{s.step, s.t, {}, 0.0, 0.0};
  bool have_diag = false;
  Tensor z_t = s.z_t;
  StepOutput out;
  for (int r = 0; r < cfg_.n_recur; ++r) {
    const Tensor noise = r == 0 ? s.noise : aux.normal(z_t.shape());
    const bool variance = rho_t > 0;
    Tensor zl = z_t.detach();
    if (variance) zl.set_requires_grad(true);
    Graph g;
    Forward f = denoise(den, zl, s.t, class_id_, cfg_.cfg_scale, readout && variance);
    VSplit sp = v_split(zl, f.v, s.t);
    Tensor z0 = sp.z0.detach();
    ControlLoss first;
    if (mu_t > 0) {
      z0 = mean_guidance_impl(models_, cfg_, z0, s.t, targets_, mu_t, gamma_t, aux, &first);
      if (!have_diag && !variance) {
        diag.loss = first.per_control;
        diag.total = first.total.item();
        have_diag = true;
      }
    }
    Tensor z_prev = ddim_update(z0, sp.eps.detach(), s.t_prev, s.eta, noise);
    if (variance) {
      ControlLoss loss = control_loss(models_, cfg_, readout ? f.tap : sp.z0, s.t, targets_, gamma_t, aux);
      g.backward(loss.total);
      Tensor grad = Tensor::from(zl.shape(), std::vector<real>(zl.grad().begin(), zl.grad().end()));
      NoGradGuard ng;
      z_prev = ops::sub(z_prev.detach(), ops::scale(grad, real(rho_t)));
      if (!have_diag) {
        diag.loss = loss.per_control;
        diag.total = loss.total.item();
        have_diag = true;
      }
    }
    out.z_prev = z_prev.detach();
    out.z0_hat = z0;
    if (r + 1 < cfg_.n_recur) {
      NoGradGuard ng;
      z_t = renoise(out.z_prev, s.t_prev, s.t, aux.normal(z_t.shape()));
    }
  }
  if (!have_diag) {
    NoGradGuard ng;
    Tensor input = readout ? denoise(den, s.z_t, s.t, class_id_, cfg_.cfg_scale, true).tap : out.z0_hat;
    ControlLoss loss = control_loss(models_, cfg_, input, s.t, targets_, 0.0, aux);
    diag.loss = loss.per_control;
    diag.total = loss.total.item();
  }
  diag.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  diag_.push_back(std::move(diag));
  return out;
}

std::vector<ControlTarget> make_targets(const GuidanceConfig& cfg, const std::vector<ControlTrack>& tracks) {
  std::vector<ControlTarget> out;
  for (const auto& tr : tracks) out.push_back({tr.kind, tr.values, cfg.weight(tr.kind)});
  return out;
}

GuidedResult guided_sample(const GuidanceModels& models, const GuidanceConfig& cfg,
                           const std::vector<ControlTarget>& targets, const NoiseSchedule& sched, int class_id,
                           uint64_t seed) {
  if (!models.denoiser) throw MissingPrerequisite("denoiser", "sampling needs the denoiser");
  SampleOptions opts;
  opts.class_id = class_id;
  opts.cfg_scale = cfg.cfg_scale;
  opts.seed = seed;
  GuidedResult res;
  const Shape shape{kFrames, kLatentChannels};
  if (targets.empty()) {
    res.z0 = sample(*models.denoiser, sched, shape, opts).z0;
    return res;
  }
  for (const auto& t : targets)
    if (t.values.dim(0) != kFrames)
      throw ShapeError("target has " + std::to_string(t.values.dim(0)) + " frames, latents have " +
                       std::to_string(kFrames));
  GuidedSampler sampler(models, cfg, targets, sched, class_id);
  res.z0 = sample(*models.denoiser, sched, shape, opts, sampler.hook()).z0;
  res.diagnostics = sampler.diagnostics();
  res.guided_steps = sampler.guided_steps();
  return res;
}

void write_guidance_csv(const std::string& path, const std::vector<std::vector<GuidanceDiag>>& runs) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "run,step,t,total,intensity,pitch,beats\n";
  os.precision(9);
  for (size_t r = 0; r < runs.size(); ++r) {
    for (const auto& d : runs[r]) {
      os << r << "," << d.step << "," << d.t << "," << d.total;
      for (auto kind : {ControlKind::kIntensity, ControlKind::kPitch, ControlKind::kBeats}) {
        os << ",";
        auto it = d.loss.find(kind);
        if (it != d.loss.end()) os << it->second;
      }
      os << "\n";
    }
  }
}

LATCHKIT_END_NAMESPACE
