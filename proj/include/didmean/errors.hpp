#pragma once

#include <stdexcept>
#include <string>

namespace didmean {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad inputs, files, or configuration. The CLI maps these to exit code 1.
struct ValidationError : Error {
  using Error::Error;
};

// Failures while fitting nuisance models or estimating. CLI exit code 2.
struct EstimationError : Error {
  using Error::Error;
};

// Empty compliant stratum or unreachable covariate-history cell.
struct PositivityError : EstimationError {
  using EstimationError::EstimationError;
};

}  // namespace didmean
