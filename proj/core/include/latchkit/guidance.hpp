#pragma once

// Selective training-free guidance: mean guidance on the clean-latent
// estimate, variance guidance through the denoiser, feature smoothing,
// iteration and recurrence, weighted multi-control losses, and three ways of
// predicting controls (latent heads, decoder plus extractors, readouts).

#include <atomic>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "latchkit/models.hpp"
#include "latchkit/training.hpp"

LATCHKIT_BEGIN_NAMESPACE

enum class Backend { kLatch, kEndToEnd, kReadout };
const char* backend_name(Backend b);
Backend parse_backend(const std::string& name);

enum class LossReduction { kMean, kSum };
// Where the smoothing noise goes: onto the predicted feature, or onto the
// latent before prediction.
enum class GammaTarget { kFeature, kLatent };

struct ControlTarget {
  ControlKind kind = ControlKind::kBeats;
  Tensor values;  // [frames, dims]
  double weight = 1.0;
};

// First ceil(fraction * T) steps guided.
std::vector<bool> make_mask(int steps, double fraction);
// Explicit step list; every index must lie in [0, T).
std::vector<bool> make_mask(int steps, const std::vector<int>& guided_steps);

struct GuidanceConfig {
  Backend backend = Backend::kLatch;
  double rho = 0.03;
  double mu = 0.03;
  double gamma = 0.3;
  int n_iter = 4;
  int n_recur = 1;
  std::vector<bool> mask;
  double cfg_scale = 7.0;
  LossReduction reduction = LossReduction::kMean;
  GammaTarget gamma_target = GammaTarget::kFeature;
  // Per-kind loss weights given to targets built by make_targets; kinds not
  // listed weigh 1.
  std::map<ControlKind, double> weights;

  // Defaults for a backend: rho = mu = 0.03 and gamma 0.3 (latent heads)
  // or 1.5 (end-to-end); rho = 0.1 with mean guidance off for readouts;
  // intensity weight 0.0005 / 0.001 / 0.005; first 20% of steps guided.
  static GuidanceConfig defaults(Backend backend, int steps = 100);
  // Defaults overridden by the [guidance] section of a config.
  static GuidanceConfig from(const Config& cfg, int steps);
  double weight(ControlKind kind) const;
  void validate(int steps) const;
};

// The models a backend draws on. Heads are looked up by control kind.
struct GuidanceModels {
  const Denoiser* denoiser = nullptr;
  const Vae* vae = nullptr;
  std::map<ControlKind, const LatchHead*> latch;
  std::map<ControlKind, const ReadoutHead*> readout;
};

struct ControlLoss {
  Tensor total;  // weighted mean over controls
  std::map<ControlKind, double> per_control;
};

// Targets from control tracks, weighted by the config's per-kind weights.
std::vector<ControlTarget> make_targets(const GuidanceConfig& cfg, const std::vector<ControlTrack>& tracks);

// Distance of the backend's prediction from every target. `input` is a
// clean-latent estimate for the latent-head and end-to-end backends and the
// tapped denoiser activation for readouts.
ControlLoss control_loss(const GuidanceModels& models, const GuidanceConfig& cfg, const Tensor& input, double t,
                         const std::vector<ControlTarget>& targets, double gamma_t, Rng& rng);

// n_iter gradient steps z <- z - step * grad loss(z), each on a fresh graph.
Tensor descend(const Tensor& z0, const std::function<Tensor(const Tensor&)>& loss, double step, int n_iter);

// z0_hat <- z0_hat - mu_t * grad, repeated n_iter times; the gradient never
// reaches the denoiser. Throws for readouts.
Tensor mean_guidance(const GuidanceModels& models, const GuidanceConfig& cfg, const Tensor& z0_hat, double t,
                     const std::vector<ControlTarget>& targets, double mu_t, double gamma_t, Rng& rng);

// Gradient of the control loss w.r.t. z_t, flowing through the CFG-combined
// denoiser call (and its tap for readouts). Also returns the loss.
struct VarianceGradient {
  Tensor grad;
  ControlLoss loss;
};
VarianceGradient variance_gradient(const GuidanceModels& models, const GuidanceConfig& cfg, const Tensor& z_t,
                                   double t, int class_id, const std::vector<ControlTarget>& targets, double gamma_t,
                                   Rng& rng);

// Number of times the mean-guidance path ran with the readout backend. The
// step logic never takes that path, so this stays 0.
std::atomic<int64_t>& readout_mean_guidance_calls();

struct GuidanceDiag {
  int step;
  double t;
  std::map<ControlKind, double> loss;
  double total;
  double seconds = 0;  // wall time of the guided step
};

// Step hook implementing one guided sampling step.
class GuidedSampler {
 public:
  GuidedSampler(GuidanceModels models, GuidanceConfig cfg, std::vector<ControlTarget> targets,
                const NoiseSchedule& sched, int class_id);

  StepOutput step(const StepState& s);
  StepHook hook() {
    return [this](const StepState& s) { return step(s); };
  }
  const std::vector<GuidanceDiag>& diagnostics() const { return diag_; }
  int guided_steps() const { return guided_; }

 private:
  GuidanceModels models_;
  GuidanceConfig cfg_;
  std::vector<ControlTarget> targets_;
  StepWeights weights_;
  int class_id_;
  std::vector<GuidanceDiag> diag_;
  int guided_ = 0;
};

// Samples one latent with guidance (or without when targets are empty).
struct GuidedResult {
  Tensor z0;
  std::vector<GuidanceDiag> diagnostics;
  int guided_steps = 0;
};
GuidedResult guided_sample(const GuidanceModels& models, const GuidanceConfig& cfg,
                           const std::vector<ControlTarget>& targets, const NoiseSchedule& sched, int class_id,
                           uint64_t seed);

void write_guidance_csv(const std::string& path, const std::vector<std::vector<GuidanceDiag>>& runs);

LATCHKIT_END_NAMESPACE
