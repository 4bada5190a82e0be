#pragma once

#include <stdexcept>
#include <string>

namespace imu {

// Base class for everything this library throws on contract violations, so
// callers can catch imu::Error and map it to a process exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Engine errors.
struct ImmigrationLoopExceeded : Error {
  using Error::Error;
};
struct LedgerMismatch : Error {
  explicit LedgerMismatch(long step, double err)
      : Error("ledger mismatch first detected at step " + std::to_string(step) +
              " (max abs error " + std::to_string(err) + ")"),
        first_bad_step(step),
        max_abs_error(err) {}
  long first_bad_step;
  double max_abs_error;
};

// Theory errors.
struct SingularSystem : Error {
  using Error::Error;
};
struct AssumptionViolated : Error {
  using Error::Error;
};
struct DegenerateEigenvalue : Error {
  using Error::Error;
};
struct NonFiniteDerivative : Error {
  using Error::Error;
};
struct NotDiagonalDesign : Error {
  using Error::Error;
};
struct NonPositiveFisher : Error {
  using Error::Error;
};

// Monte Carlo errors.
struct InsufficientReplications : Error {
  using Error::Error;
};
struct NotTheorem32Regime : Error {
  using Error::Error;
};

}  // namespace imu
