#pragma once

// Control alignment and distribution-level quality metrics for generated
// audio.

#include <map>
#include <span>
#include <vector>

#include "latchkit/world.hpp"

LATCHKIT_BEGIN_NAMESPACE

// Distance between an extracted feature track and a target: MSE in dB^2 for
// intensity, mean BCE of probabilities for pitch and beats.
double control_distance(ControlKind kind, const Tensor& extracted, const Tensor& target);

// Re-extracts every target's feature from the waveform and scores it.
std::map<ControlKind, double> alignment(const Tensor& wave, const std::vector<ControlTrack>& targets);

inline constexpr int kBands = 32;

// Mean log energy in 32 triangular mel-spaced bands (0 Hz to Nyquist) of a
// clip's power spectrogram.
std::vector<double> band_energies(std::span<const real> wave);

// Frechet distance between Gaussians fitted to two sets of feature vectors.
// Each set needs at least two vectors of equal length.
double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

double median(std::vector<double> v);

// One-sided sign test: probability of at least `wins` successes out of
// `trials` fair coin flips (ties already removed by the caller).
double sign_test_p(int wins, int trials);

LATCHKIT_END_NAMESPACE
