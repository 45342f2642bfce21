#pragma once

#include <stdexcept>
#include <string>

namespace terlab {

// Error categories used across the library. Messages carry the offending
// shapes / indices / ids so failures are diagnosable from the what() string.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct UsageError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

} // namespace terlab
