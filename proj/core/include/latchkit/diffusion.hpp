#pragma once

// Variance-preserving noise schedule, v-parameterization algebra and the
// stochastic DDIM sampler.
//
// Sampling step k (k = 0 .. T-1) moves from t = (T-k)/T to t_prev = (T-k-1)/T,
// so step 0 is the noisiest. Latents are [frames, channels] tensors.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "latchkit/random.hpp"
#include "latchkit/tensor.hpp"

LATCHKIT_BEGIN_NAMESPACE

struct AlphaSigma {
  double alpha;
  double sigma;
};

class NoiseSchedule {
 public:
  // eta_scale in [0, 1] multiplies the DDIM stochasticity (1 = fully
  // stochastic, 0 = deterministic).
  explicit NoiseSchedule(int steps = 100, double eta_scale = 1.0);

  // alpha = sqrt(1 - t), sigma = sqrt(t).
  static AlphaSigma at(double t);
  static double alpha(double t) { return at(t).alpha; }
  static double sigma(double t) { return at(t).sigma; }

  int steps() const { return steps_; }
  double eta_scale() const { return eta_scale_; }
  double time(int step) const;
  double prev_time(int step) const;
  double eta(int step) const;

 private:
  int steps_;
  double eta_scale_;
};

// s(t) = alpha(t) / normalizer on the T + 1 grid points, indexed like steps
// (index k is time (T - k) / T, index T is t = 0). The normalizer defaults to
// the sum of alpha over the grid, so the weights sum to 1.
class StepWeights {
 public:
  explicit StepWeights(const NoiseSchedule& sched, double normalizer_scale = 1.0);
  double operator[](int step) const { return weights_.at(static_cast<size_t>(step)); }
  double normalizer() const { return normalizer_; }
  const std::vector<double>& values() const { return weights_; }

 private:
  std::vector<double> weights_;
  double normalizer_;
};

struct VSplit {
  Tensor z0;
  Tensor eps;
};

// Differentiable: gradients flow to z_t and v.
VSplit v_split(const Tensor& z_t, const Tensor& v, double t);
// v = alpha * eps - sigma * z0.
Tensor v_target(const Tensor& z0, const Tensor& eps, double t);

// z_prev = alpha_prev * z0 + sqrt(sigma_prev^2 - eta^2) * eps + eta * noise.
Tensor ddim_update(const Tensor& z0_hat, const Tensor& eps_hat, double t_prev, double eta, const Tensor& noise);
Tensor ddim_step(const Tensor& z_t, const Tensor& v, double t, double t_prev, double eta, const Tensor& noise);
Tensor forward_diffuse(const Tensor& z0, double t, const Tensor& noise);
// Samples p(z_t | z_prev) for t >= t_prev.
Tensor renoise(const Tensor& z_prev, double t_prev, double t, const Tensor& noise);
Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double w);

// A conditional v-prediction model.
class VelocityModel {
 public:
  virtual ~VelocityModel() = default;
  virtual Tensor velocity(const Tensor& z_t, double t, int class_id) const = 0;
  virtual int null_class() const = 0;
};

// Exact v-prediction for data distributed elementwise as N(mean, std^2).
// Ignores the class.
class GaussianVelocityModel : public VelocityModel {
 public:
  GaussianVelocityModel(double mean, double std) : mean_(mean), std_(std) {}
  Tensor velocity(const Tensor& z_t, double t, int class_id) const override;
  int null_class() const override { return 0; }

 private:
  double mean_;
  double std_;
};

// Classifier-free guided velocity. With w == 1 only the conditional branch
// is evaluated.
Tensor cfg_velocity(const VelocityModel& model, const Tensor& z_t, double t, int class_id, double w);

struct StepState {
  int step = 0;
  double t = 1.0;
  double t_prev = 0.0;
  double eta = 0.0;
  Tensor z_t;
  Tensor noise;  // main-stream draw for this step
  Rng* aux = nullptr;  // separate stream for guidance randomness
};

struct StepOutput {
  Tensor z_prev;
  Tensor z0_hat;
};

struct SampleOptions {
  int class_id = 0;
  double cfg_scale = 7.0;
  uint64_t seed = 0;
  bool record = false;  // keep per-step z_t and z0_hat
};

// Replaces a sampling step. Returning an undefined z_prev falls back to the
// plain step.
using StepHook = std::function<StepOutput(const StepState&)>;

struct SampleResult {
  Tensor z0;
  // When recorded: states[k] is z_t entering step k, states[T] = z0.
  std::vector<Tensor> states;
  std::vector<Tensor> z0_hats;
};

StepOutput plain_step(const VelocityModel& model, int class_id, double cfg_scale, const StepState& s);

SampleResult sample(const VelocityModel& model, const NoiseSchedule& sched, Shape latent_shape,
                    const SampleOptions& opts, const StepHook& hook = {});

// Trajectory dump: u32 steps, u32 frames, u32 channels, then steps+1
// row-major little-endian float32 tensors.
void write_trajectory(std::ostream& os, int steps, const std::vector<Tensor>& states);
std::vector<Tensor> read_trajectory(std::istream& is, int* steps = nullptr);

LATCHKIT_END_NAMESPACE
