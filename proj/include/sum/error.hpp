// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sum {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Configuration or schema does not match what a component expects.
struct ConfigError : Error {
  using Error::Error;
};

// A recurring update asked for a day that does not follow the latest snapshot.
struct StalenessError : Error {
  using Error::Error;
};

// A version that does not strictly exceed the current one.
struct VersionError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// Corrupt or incompatible on-disk / on-wire data.
struct FormatError : Error {
  using Error::Error;
};

// Metric undefined on the given input (e.g. NE over single-class labels).
struct DegenerateError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

}  // namespace sum
