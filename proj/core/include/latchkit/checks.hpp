#pragma once

// Self-contained correctness checks shared by the command-line selftest and
// the acceptance suite. None of them needs trained checkpoints.

#include <string>

#include "latchkit/config.hpp"

LATCHKIT_BEGIN_NAMESPACE

struct CheckResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

// One line: "criterion <id> <name>: PASS|FAIL (<detail>) [<seconds>s]".
std::string format_result(const CheckResult& r);

// Every primitive and composite gradient against central differences, in
// double precision.
CheckResult check_autodiff();
// alpha z0 + sigma eps reproduces z_t for random (z_t, v, t).
CheckResult check_v_identity(int trials = 1000, uint64_t seed = 2);
// Deterministic DDIM on exact Gaussian velocities reproduces the data marginal.
CheckResult check_sampler_oracle(uint64_t seed = 42);
// All-false masks and zero strengths leave sampling bit-identical, for every
// backend.
CheckResult check_neutrality(int steps = 100);
// Sparse BCE hand case, Savitzky-Golay exactness and mask counting.
CheckResult check_recipes();
// Trains a miniature stack under `scratch_dir`, generates twice with the
// same seed (once in parallel) and byte-compares the run directories.
CheckResult check_generate_determinism(const std::string& scratch_dir);

LATCHKIT_END_NAMESPACE
