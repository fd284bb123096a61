#pragma once

#include <stdexcept>
#include <string>

namespace flexicup {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad argument values (coverage out of range, non-positive extents, ...).
struct ParamError : Error {
  using Error::Error;
};

// Query outside the workspace or a grid.
struct BoundsError : Error {
  using Error::Error;
};

// A perception operation fed a frame of the wrong modality.
struct ModalityError : Error {
  using Error::Error;
};

// Wire protocol encode violations (oversize payload, unknown type).
struct ProtocolError : Error {
  using Error::Error;
};

// Socket/session failures and timeouts.
struct SessionError : Error {
  using Error::Error;
};

struct TimeoutError : SessionError {
  using SessionError::SessionError;
};

// File or fixture problems.
struct IoError : Error {
  using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace flexicup
