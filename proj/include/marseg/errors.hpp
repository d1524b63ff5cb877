// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace marseg {

// Base for everything thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A composite label code that cannot exist under the taxonomy.
struct InvalidLabelError : Error {
  using Error::Error;
};

// Rotation not orthonormal / det != +1.
struct InvalidPoseError : Error {
  using Error::Error;
};

// Tensor shape or arity mismatch.
struct ShapeError : Error {
  using Error::Error;
};

// Inconsistent configuration (grid configs, flags, manifests built wrong).
struct ConfigError : Error {
  using Error::Error;
};

// Unreadable, truncated or mismatched on-disk data.
struct DataError : Error {
  using Error::Error;
};

// Operation invoked with missing prerequisite state (e.g. optimizer step
// before gradients exist).
struct StateError : Error {
  using Error::Error;
};

}  // namespace marseg
