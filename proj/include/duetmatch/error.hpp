#pragma once

#include <stdexcept>
#include <string>

namespace duetmatch {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Raised when a gradient is requested from a graph that does not track it.
struct DetachedError : std::logic_error {
    using std::logic_error::logic_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Case-on-disk failures. Each is a distinct type so callers can tell them apart.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MalformedHeaderError : IoError {
    using IoError::IoError;
};
struct PayloadShapeError : IoError {
    using IoError::IoError;
};
struct UnknownDtypeError : IoError {
    using IoError::IoError;
};

}  // namespace duetmatch
