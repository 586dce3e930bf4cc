#pragma once

#include <stdexcept>
#include <string>

namespace latchkit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// A NaN or infinity surfaced in a loss or state that must stay finite.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// A later pipeline phase was requested before an earlier one produced its
// artifact (e.g. denoiser training without a trained autoencoder).
class MissingPrerequisite : public Error {
 public:
  MissingPrerequisite(std::string phase, const std::string& what)
      : Error(what), phase_(std::move(phase)) {}
  const std::string& phase() const { return phase_; }

 private:
  std::string phase_;
};

}  // namespace latchkit
