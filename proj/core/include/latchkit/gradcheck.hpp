#pragma once

// Central-difference gradient checks for every primitive and composite loss.
// They run in the double-precision build of the library, which programs link
// next to the default build.

#include <string>
#include <vector>

#include "latchkit/config.hpp"

namespace latchkit {

struct GradCheck {
  std::string name;
  double error = 0.0;      // max relative error over the leaf elements
  double tolerance = 0.0;  // 1e-4 for primitives, 1e-3 for composites
  bool passed() const { return error < tolerance; }
};

namespace f64 {

std::vector<std::string> gradient_check_names();
GradCheck run_gradient_check(const std::string& name);
std::vector<GradCheck> run_gradient_checks();

}  // namespace f64
}  // namespace latchkit
