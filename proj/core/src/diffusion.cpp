#include "latchkit/diffusion.hpp"

#include <cmath>
#include <istream>
#include <ostream>

#include "latchkit/binio.hpp"
#include "latchkit/ops.hpp"

LATCHKIT_BEGIN_NAMESPACE

NoiseSchedule::NoiseSchedule(int steps, double eta_scale) : steps_(steps), eta_scale_(eta_scale) {
  if (steps < 1) throw Error("noise schedule needs at least one step, got " + std::to_string(steps));
  if (!(eta_scale >= 0.0 && eta_scale <= 1.0)) throw Error("eta scale must lie in [0, 1]");
}

AlphaSigma NoiseSchedule::at(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw Error("diffusion time " + std::to_string(t) + " outside [0, 1]");
  return {std::sqrt(1.0 - t), std::sqrt(t)};
}

double NoiseSchedule::time(int step) const {
  if (step < 0 || step >= steps_) throw Error("step index " + std::to_string(step) + " out of range");
  return static_cast<double>(steps_ - step) / steps_;
}

double NoiseSchedule::prev_time(int step) const {
  if (step < 0 || step >= steps_) throw Error("step index " + std::to_string(step) + " out of range");
  return static_cast<double>(steps_ - step - 1) / steps_;
}

// Posterior standard deviation of q(z_prev | z_t, z_0), scaled.
double NoiseSchedule::eta(int step) const {
  const auto [a, s] = at(time(step));
  const auto [ap, sp] = at(prev_time(step));
  if (sp == 0.0) return 0.0;
  double base = sp;
  if (s > 0.0 && ap > 0.0) {
    const double r = 1.0 - (a * a) / (ap * ap);
    base = (sp / s) * std::sqrt(std::max(r, 0.0));
  }
  return eta_scale_ * std::min(base, sp);
}

StepWeights::StepWeights(const NoiseSchedule& sched, double normalizer_scale) {
  const int n = sched.steps();
  // Normalized over the full grid t_n = n/T, n = T .. 0, so it stays defined
  // for T = 1 where the only sampling time has alpha = 0.
  double total = 0.0;
  for (int i = 0; i <= n; ++i) total += NoiseSchedule::alpha(static_cast<double>(n - i) / n);
  normalizer_ = total * normalizer_scale;
  weights_.resize(static_cast<size_t>(n) + 1);
  for (int i = 0; i <= n; ++i) weights_[static_cast<size_t>(i)] = NoiseSchedule::alpha(static_cast<double>(n - i) / n) / normalizer_;
}

namespace {
void same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
}

Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
  return ops::add(ops::scale(x, static_cast<real>(a)), ops::scale(y, static_cast<real>(b)));
}
}  // namespace

VSplit v_split(const Tensor& z_t, const Tensor& v, double t) {
  same_shape("v_split", z_t, v);
  const auto [a, s] = NoiseSchedule::at(t);
  return {axpby(a, z_t, -s, v), axpby(s, z_t, a, v)};
}

Tensor v_target(const Tensor& z0, const Tensor& eps, double t) {
  same_shape("v_target", z0, eps);
  const auto [a, s] = NoiseSchedule::at(t);
  return axpby(a, eps, -s, z0);
}

Tensor ddim_update(const Tensor& z0_hat, const Tensor& eps_hat, double t_prev, double eta, const Tensor& noise) {
  same_shape("ddim_update", z0_hat, eps_hat);
  const auto [ap, sp] = NoiseSchedule::at(t_prev);
  const double rad = sp * sp - eta * eta;
  if (rad < -1e-12) {
    throw NumericalError("ddim_update: eta_t = " + std::to_string(eta) + " exceeds sigma(t_prev) = " +
                         std::to_string(sp));
  }
  Tensor out = axpby(ap, z0_hat, std::sqrt(std::max(rad, 0.0)), eps_hat);
  if (eta != 0.0) {
    same_shape("ddim_update", z0_hat, noise);
    out = ops::add(out, ops::scale(noise, static_cast<real>(eta)));
  }
  return out;
}

Tensor ddim_step(const Tensor& z_t, const Tensor& v, double t, double t_prev, double eta, const Tensor& noise) {
  if (!(t > t_prev)) throw Error("ddim_step: t must exceed t_prev");
  auto [z0, eps] = v_split(z_t, v, t);
  return ddim_update(z0, eps, t_prev, eta, noise);
}

Tensor forward_diffuse(const Tensor& z0, double t, const Tensor& noise) {
  same_shape("forward_diffuse", z0, noise);
  const auto [a, s] = NoiseSchedule::at(t);
  return axpby(a, z0, s, noise);
}

Tensor renoise(const Tensor& z_prev, double t_prev, double t, const Tensor& noise) {
  same_shape("renoise", z_prev, noise);
  if (t < t_prev) throw Error("renoise: t must not precede t_prev");
  const auto [ap, sp] = NoiseSchedule::at(t_prev);
  const auto [a, s] = NoiseSchedule::at(t);
  if (ap == 0.0) throw Error("renoise: cannot renoise from t = 1 (alpha is zero)");
  const double k = a / ap;
  const double rad = std::max(s * s - k * k * sp * sp, 0.0);
  return axpby(k, z_prev, std::sqrt(rad), noise);
}

Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double w) {
  same_shape("cfg_combine", v_cond, v_uncond);
  return ops::add(v_uncond, ops::scale(ops::sub(v_cond, v_uncond), static_cast<real>(w)));
}

Tensor GaussianVelocityModel::velocity(const Tensor& z_t, double t, int) const {
  const auto [a, s] = NoiseSchedule::at(t);
  const double var = a * a * std_ * std_ + s * s;
  // E[z0 | z_t] and E[eps | z_t] are affine in z_t.
  const double k0 = a * std_ * std_ / var;
  const double ke = s / var;
  Tensor out = Tensor::zeros(z_t.shape());
  auto o = out.mutable_data();
  auto z = z_t.data();
  for (size_t i = 0; i < o.size(); ++i) {
    const double c = z[i] - a * mean_;
    const double z0 = mean_ + k0 * c;
    const double eps = ke * c;
    o[i] = static_cast<real>(a * eps - s * z0);
  }
  return out;
}

Tensor cfg_velocity(const VelocityModel& model, const Tensor& z_t, double t, int class_id, double w) {
  Tensor vc = model.velocity(z_t, t, class_id);
  if (w == 1.0) return vc;
  Tensor vu = model.velocity(z_t, t, model.null_class());
  return cfg_combine(vc, vu, w);
}

StepOutput plain_step(const VelocityModel& model, int class_id, double cfg_scale, const StepState& s) {
  NoGradGuard no_grad;
  Tensor v = cfg_velocity(model, s.z_t, s.t, class_id, cfg_scale);
  auto [z0, eps] = v_split(s.z_t, v, s.t);
  return {ddim_update(z0, eps, s.t_prev, s.eta, s.noise), z0};
}

SampleResult sample(const VelocityModel& model, const NoiseSchedule& sched, Shape latent_shape,
                    const SampleOptions& opts, const StepHook& hook) {
  Rng main(opts.seed, 0);
  Rng aux(opts.seed, 1);
  SampleResult result;
  Tensor z = main.normal(latent_shape);
  for (int k = 0; k < sched.steps(); ++k) {
    StepState s;
    s.step = k;
    s.t = sched.time(k);
    s.t_prev = sched.prev_time(k);
    s.eta = sched.eta(k);
    s.z_t = z;
    s.noise = main.normal(latent_shape);
    s.aux = &aux;
    StepOutput out;
    if (hook) out = hook(s);
    if (!out.z_prev.defined()) out = plain_step(model, opts.class_id, opts.cfg_scale, s);
    if (opts.record) {
      result.states.push_back(z);
      result.z0_hats.push_back(out.z0_hat.defined() ? out.z0_hat.detach() : Tensor());
    }
    z = out.z_prev.detach();
  }
  if (opts.record) result.states.push_back(z);
  result.z0 = z;
  return result;
}

void write_trajectory(std::ostream& os, int steps, const std::vector<Tensor>& states) {
  if (states.empty() || static_cast<int>(states.size()) != steps + 1) {
    throw Error("write_trajectory: expected " + std::to_string(steps + 1) + " states, got " +
                std::to_string(states.size()));
  }
  const Shape& shape = states.front().shape();
  if (shape.size() != 2) throw ShapeError("write_trajectory: states must be [frames, channels]");
  binio::put<uint32_t>(os, static_cast<uint32_t>(steps));
  binio::put<uint32_t>(os, static_cast<uint32_t>(shape[0]));
  binio::put<uint32_t>(os, static_cast<uint32_t>(shape[1]));
  for (const auto& s : states) {
    if (s.shape() != shape) throw ShapeError("write_trajectory: inconsistent state shapes");
    binio::put_floats(os, s.data());
  }
}

std::vector<Tensor> read_trajectory(std::istream& is, int* steps) {
  const auto t = binio::get<uint32_t>(is);
  const auto frames = binio::get<uint32_t>(is);
  const auto channels = binio::get<uint32_t>(is);
  if (steps) *steps = static_cast<int>(t);
  std::vector<Tensor> out;
  for (uint32_t i = 0; i <= t; ++i) {
    Tensor x = Tensor::zeros({frames, channels});
    binio::get_floats(is, x.mutable_data());
    out.push_back(x);
  }
  return out;
}

LATCHKIT_END_NAMESPACE
