// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace driftlab {

inline constexpr const char* kVersion = "0.1.0";

// Error taxonomy. The CLI maps these onto process exit codes:
// config -> 2, dependency -> 3, numeric -> 4, anything else -> 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct ContractError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct DependencyError : Error {
    using Error::Error;
};

struct IncompatibilityError : Error {
    using Error::Error;
};

struct GenerationError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace driftlab
