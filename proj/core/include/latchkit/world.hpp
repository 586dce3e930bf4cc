#pragma once

// Synthetic audio world with known controls, and differentiable feature
// extractors for intensity, pitch and beats.
//
// Clips are 16384 mono samples at 8 kHz. Features are computed at a hop of 64
// samples, i.e. one value per latent frame (256 frames).

#include <cstdint>
#include <string>
#include <vector>

#include "latchkit/random.hpp"
#include "latchkit/tensor.hpp"

LATCHKIT_BEGIN_NAMESPACE

inline constexpr int kSampleRate = 8000;
inline constexpr int kSamples = 16384;
inline constexpr int kHop = 64;
inline constexpr int kFrames = kSamples / kHop;
inline constexpr int kPitchBins = 16;
inline constexpr int kClasses = 3;  // sine, saw, square
inline constexpr double kClickSeconds = 0.005;
inline constexpr double kClickAmplitude = 0.5;

enum class ControlKind { kIntensity, kPitch, kBeats };

const char* kind_name(ControlKind kind);
ControlKind parse_kind(const std::string& name);
int kind_dims(ControlKind kind);

// 110 Hz * 2^(bin / 5): three octaves up to 880 Hz.
double pitch_frequency(int bin);

struct ControlTrack {
  ControlKind kind = ControlKind::kIntensity;
  Tensor values;  // [frames, dims]

  int64_t frames() const { return values.dim(0); }
  int64_t dims() const { return values.dim(1); }
};

struct WorldSpec {
  int class_label = 0;
  // Envelope amplitude at equally spaced knots spanning the clip (linear in
  // between). A single knot is a constant envelope.
  std::vector<double> envelope{0.5};
  // Pitch bins, each held for an equal share of the clip.
  std::vector<int> pitches{5};
  double bpm = 120.0;
  double beat_phase = 0.0;  // seconds until the first beat
  bool clicks = true;
};

struct Clip {
  std::vector<real> samples;
  ControlTrack intensity;
  ControlTrack pitch;
  ControlTrack beats;
};

// Beat i sits at phase + i * 60 / bpm for i < floor((duration - phase) * bpm / 60).
std::vector<double> beat_times(const WorldSpec& spec);
Clip synth(const WorldSpec& spec);
// Random spec: envelope knots in [0.05, 0.25] (quiet enough for clicks to
// stand out), 1-4 pitch segments,
// 60-180 BPM, random phase within one period.
WorldSpec random_spec(Rng& rng);
// Spec of clip `index` in the dataset identified by `seed`.
WorldSpec dataset_spec(uint64_t seed, int64_t index);

// Extractors take a waveform tensor of kSamples values ([N] or [N, 1]) and
// return [kFrames, dims]. All are differentiable in the waveform.
Tensor extract_intensity(const Tensor& wave);
Tensor extract_pitch(const Tensor& wave);
Tensor extract_beats(const Tensor& wave);
Tensor extract(ControlKind kind, const Tensor& wave);
ControlTrack extract_track(ControlKind kind, const Tensor& wave);

std::vector<double> savgol_coefficients(int window, int polyorder);
// Mirror-padded Savitzky-Golay smoothing.
std::vector<double> savgol(const std::vector<double>& x, int window, int polyorder);
// The same smoothing as a [n, n] matrix acting on column vectors.
Tensor savgol_matrix(int n, int window, int polyorder);

// Linear interpolation onto target_frames points; endpoints preserved.
std::vector<double> resample_track(const std::vector<double>& x, int target_frames);

void write_wav(const std::string& path, const std::vector<real>& samples, int sample_rate = kSampleRate);
std::vector<real> read_wav(const std::string& path, int* sample_rate = nullptr);

// CSV with header frame,kind,dim,value. Several tracks may share one file.
void write_tracks_csv(const std::string& path, const std::vector<ControlTrack>& tracks);
std::vector<ControlTrack> read_tracks_csv(const std::string& path);

LATCHKIT_END_NAMESPACE
