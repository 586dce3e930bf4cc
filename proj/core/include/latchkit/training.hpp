#pragma once

// Training loops for the autoencoder, the denoiser and the control heads, the
// trajectory dataset used by backward-simulated heads, and the text config.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "latchkit/models.hpp"

LATCHKIT_BEGIN_NAMESPACE

// Flat key=value file with [section] headers. Keys are addressed as
// "section.key".
class Config {
 public:
  Config() = default;
  static Config load(const std::string& path);
  static Config parse(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  double get(const std::string& key, double fallback) const;
  int64_t get(const std::string& key, int64_t fallback) const;
  int get(const std::string& key, int fallback) const { return int(get(key, int64_t(fallback))); }
  bool get(const std::string& key, bool fallback) const;
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }
  std::string to_string() const;

 private:
  std::map<std::string, std::string> values_;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(ParamSet& params, AdamConfig cfg = {});
  // Applies one update from the accumulated gradients, then clears them.
  void step();
  int64_t steps() const { return t_; }

 private:
  ParamSet& params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

struct TrainConfig {
  int64_t clips = 4096;    // training clips
  int64_t heldout = 256;   // held-out clips, indexed after the training clips
  uint64_t data_seed = 1234;
  uint64_t seed = 0;
  int batch = 16;
  AdamConfig adam;
  int vae_steps = 5000;
  int denoiser_steps = 20000;
  int head_steps = 3000;
  int vae_crop = 4096;      // samples
  int denoiser_crop = 256;  // frames
  int head_crop = 256;      // frames
  double class_dropout = 0.1;
  double silence_fraction = 0.05;  // share of autoencoder crops that are silent
  double sparse_threshold = 0.2;
  int log_every = 25;

  static TrainConfig from(const Config& cfg);
};

struct CurvePoint {
  int step;
  double loss;
};
using Curve = std::vector<CurvePoint>;
void write_curve_csv(const std::string& path, const Curve& curve);

// Called every log_every steps and on the last step.
using Progress = std::function<void(const std::string& phase, int step, double loss)>;

// Time-frequency magnitudes of a waveform [N] or [N, 1] with a Hann window:
// [frames, n_fft / 2 + 1], frames = 1 + (N - n_fft) / hop.
Tensor stft_magnitude(const Tensor& wave, int n_fft, int hop);

// 0.5 * mean over below-threshold targets + 0.5 * mean over the rest of the
// elementwise BCE; a single mean when one side is empty.
Tensor sparse_bce(const Tensor& logits, const Tensor& targets, double threshold = 0.2);
// Head training loss: MSE for intensity, sparse BCE for pitch, BCE for beats.
Tensor head_loss(ControlKind kind, const Tensor& pred, const Tensor& target, double threshold = 0.2);

// Clean latents of dataset clips with optional control targets extracted from
// the autoencoder round trip D(E(x)).
struct LatentSet {
  std::vector<Tensor> z;
  std::vector<int> labels;
  std::map<ControlKind, std::vector<Tensor>> targets;
  size_t size() const { return z.size(); }
};
LatentSet encode_dataset(const Vae& vae, uint64_t data_seed, int64_t first, int64_t count, bool with_targets);

// Autoencoder reconstruction loss: time-domain MSE plus spectral magnitude MSE
// at FFT sizes 256, 512 and 1024.
Tensor reconstruction_loss(const Tensor& recon, const Tensor& target);
double snr_db(std::span<const real> reference, std::span<const real> estimate);

Vae train_vae(const TrainConfig& cfg, Curve* curve = nullptr, const Progress& progress = {});
// Sets the latent scale from the spread of the raw latents of `count` clips.
void calibrate_latent_scale(Vae& vae, const TrainConfig& cfg, int64_t count = 64);

Denoiser train_denoiser(const Vae& vae, const LatentSet& data, const TrainConfig& cfg, Curve* curve = nullptr,
                        const Progress& progress = {});
// Mean v-prediction MSE over the set at fixed random times, with the variance
// of the targets for reference.
struct VLoss {
  double loss;
  double target_variance;
};
VLoss evaluate_denoiser(const Denoiser& den, const LatentSet& data, uint64_t seed, int draws_per_clip = 4);

struct TrajectoryRecord {
  int step;
  double t;
  Tensor z_t;     // noisy latent at this step
  Tensor z0_hat;  // denoiser's clean-latent estimate at this step
};

struct Trajectory {
  int class_id = 0;
  uint64_t seed = 0;
  std::map<ControlKind, Tensor> targets;  // features of decode(final z0)
  std::vector<TrajectoryRecord> records;
};

struct TrajectoryDataset {
  int steps = 0;
  int stride = 1;
  std::vector<Trajectory> trajectories;
  size_t records() const;
};

// Unguided CFG sampling runs; every `stride`-th step is recorded and paired
// with the features of the run's decoded output.
TrajectoryDataset build_trajectory_dataset(const Denoiser& den, const Vae& vae, const NoiseSchedule& sched,
                                           int n, int stride, uint64_t seed, double cfg_scale = 7.0);
void write_trajectory_dataset(const std::string& path, const TrajectoryDataset& ds);
TrajectoryDataset read_trajectory_dataset(const std::string& path);

// Clean heads train on clean latents, forward heads on forward-diffused clean
// latents at uniform t, backward heads on the clean-latent estimates recorded
// along sampling trajectories.
LatchHead train_latch(ControlKind kind, NoiseMode mode, const LatentSet* data, const TrajectoryDataset* traj,
                      const TrainConfig& cfg, Curve* curve = nullptr, const Progress& progress = {});
ReadoutHead train_readout(ControlKind kind, const Denoiser& den, const LatentSet& data, const TrainConfig& cfg,
                          Curve* curve = nullptr, const Progress& progress = {});

// Mean head loss over a latent set; t selects a noise level for conditioned
// heads (forward-diffused inputs when t > 0).
double evaluate_latch(const LatchHead& head, const LatentSet& data, std::optional<double> t = std::nullopt,
                      uint64_t seed = 0);
// Per-dimension mean of the targets in head output units: dB for intensity,
// the logit of the mean probability otherwise.
std::vector<double> constant_prediction(ControlKind kind, const std::vector<const Tensor*>& targets);
// Loss of predicting the per-element mean target of `reference` everywhere.
double constant_baseline(ControlKind kind, const LatentSet& reference, const LatentSet& data,
                         double threshold = 0.2);

LATCHKIT_END_NAMESPACE
