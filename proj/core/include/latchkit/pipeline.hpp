#pragma once

// The end-to-end workflow over a working directory: training phases that
// write checkpoints and curves, seeded generation into self-contained run
// directories, evaluation of a run directory, and compute profiling.

#include <optional>
#include <string>
#include <vector>

#include "latchkit/guidance.hpp"
#include "latchkit/training.hpp"

LATCHKIT_BEGIN_NAMESPACE

// Checkpoints and curves live in [paths] workdir (relative paths resolve
// against `base_dir`, normally the config file's directory).
class Workspace {
 public:
  explicit Workspace(Config cfg, std::string base_dir = ".");
  static Workspace open(const std::string& config_path);

  const Config& config() const { return cfg_; }
  const TrainConfig& train() const { return train_; }
  const std::string& dir() const { return dir_; }
  std::string path(const std::string& file) const;

  std::string vae_path() const { return path("vae.lch1"); }
  std::string denoiser_path() const { return path("denoiser.lch1"); }
  std::string trajectories_path() const { return path("trajectories.ltj"); }
  std::string latch_path(ControlKind kind, NoiseMode mode) const;
  std::string readout_path(ControlKind kind) const;

  NoiseSchedule schedule() const;
  int steps() const;
  double cfg_scale() const;
  // First held-out clip index (held-out clips follow the training clips).
  int64_t heldout_start() const { return train_.clips; }

  // Loaders throw MissingPrerequisite naming the phase that writes the file.
  Vae load_vae() const;
  Denoiser load_denoiser() const;
  LatchHead load_latch(ControlKind kind, NoiseMode mode) const;
  ReadoutHead load_readout(ControlKind kind) const;
  TrajectoryDataset load_trajectories() const;

  // Training phases. Each writes its checkpoint and a `<phase>_curve.csv`.
  void train_vae(const Progress& progress = {}) const;
  void train_denoiser(const Progress& progress = {}) const;
  void build_trajectories(int n, int stride, uint64_t seed) const;
  void train_latch(ControlKind kind, NoiseMode mode, const Progress& progress = {}) const;
  void train_readout(ControlKind kind, const Progress& progress = {}) const;

 private:
  Config cfg_;
  TrainConfig train_;
  std::string dir_;
};

struct GenerateOptions {
  Backend backend = Backend::kLatch;
  std::vector<ControlKind> kinds;  // guided controls; empty = unguided
  NoiseMode latch_mode = NoiseMode::kBackward;
  int runs = 8;
  uint64_t seed = 0;
  int jobs = 1;
  std::optional<double> mask_fraction;
  std::string out;          // run directory
  std::string targets_csv;  // optional fixed targets for every run
  bool write_files = true;
};

struct RunRecord {
  int run = 0;
  int class_id = 0;
  uint64_t seed = 0;
  int64_t reference = -1;  // held-out clip supplying the targets
  int guided_steps = 0;
  double seconds = 0;
  double step_seconds = 0;  // median wall time of a guided step
  int64_t peak_bytes = 0;   // peak live tensor bytes above the run's start
  Tensor z0;
  std::vector<real> wave;
  std::vector<ControlTrack> targets;      // all three reference tracks
  std::vector<GuidanceDiag> diagnostics;  // guided steps only
};

// Guidance settings for a generation: the [guidance] section of the config,
// the backend and mask overrides from `opts`.
GuidanceConfig guidance_config(const Workspace& ws, const GenerateOptions& opts);

// Run i samples class label(reference clip i) with seed opts.seed + i and
// targets from the held-out clip heldout_start + i (or the fixed targets).
// Writes, when requested: config.ini, manifest.ini, runs.csv,
// run_NNN.wav, run_NNN_targets.csv, and guidance.csv for guided runs.
std::vector<RunRecord> generate(const Workspace& ws, const GenerateOptions& opts);

struct ReportRow {
  std::string run;
  int class_id = 0;
  uint64_t seed = 0;
  std::map<ControlKind, double> alignment;
  double seconds = 0;
  int guided_steps = 0;
  int64_t peak_bytes = 0;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::map<ControlKind, double> median_alignment;
  double spectral_fd = 0;
};

// Scores a run directory against its stored targets, and the generated set
// against `heldout` synthetic held-out clips. Writes report.csv into the
// run directory.
EvalReport evaluate(const std::string& run_dir, int heldout = 64);

struct ProfileRow {
  Backend backend;
  int runs = 0;
  double run_seconds = 0;   // median per run
  double step_seconds = 0;  // median per guided step
  int64_t peak_bytes = 0;   // max over runs
  double unguided_seconds = 0;
};

// Same seeds, targets and mask for every backend; also times unguided runs.
std::vector<ProfileRow> profile(const Workspace& ws, const std::vector<Backend>& backends,
                                const std::vector<ControlKind>& kinds, int runs, uint64_t seed,
                                std::optional<double> mask_fraction = std::nullopt);
void write_profile_csv(const std::string& path, const std::vector<ProfileRow>& rows);

// 64-bit FNV-1a digest of a file's bytes, as 16 hex digits.
std::string file_digest(const std::string& path);

LATCHKIT_END_NAMESPACE
