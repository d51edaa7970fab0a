#pragma once

#include <stdexcept>
#include <string>

namespace cloak {

/// Base class for all errors raised by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shapes do not line up. Messages name the offending
/// layer index where one is known.
struct ShapeError : Error {
  using Error::Error;
};

/// An operation attempted to mutate a network whose trainable flag is
/// false, or was handed a trainable network where a frozen one is required.
struct FrozenContractError : Error {
  using Error::Error;
};

/// Dataset files missing, truncated or failing checksum validation.
struct DataError : Error {
  using Error::Error;
};

/// Unknown classifier architecture name.
struct UnknownArchError : Error {
  using Error::Error;
};

}  // namespace cloak
