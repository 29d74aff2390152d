#pragma once

#include <stdexcept>
#include <string>

namespace nolab {

// Configuration and input-file problems. CLI maps these to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failures (divergence, NaN loss, solver residual too large).
// CLI maps these to exit code 3.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace nolab
