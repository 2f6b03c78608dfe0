#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mdm {

/// Bad caller input: shapes, ranges, sizes.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operation invoked in the wrong state (duplicate insertion, missing cache).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A non-finite value was produced or detected.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite evaluator output during ODE sampling.
class SamplerError : public NumericError {
 public:
  SamplerError(const std::string& what, std::size_t step)
      : NumericError(what + " (sampler step " + std::to_string(step) + ")"),
        step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace mdm
