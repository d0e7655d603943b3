#pragma once

#include <stdexcept>
#include <string>

namespace nctta {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible matrix shapes; message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Vector norm below the 1e-12 floor; callers skip the sample and log.
struct DegenerateVectorError : Error {
    using Error::Error;
};

// NaN/Inf surfaced from a computation that must stay finite.
struct NonFiniteError : Error {
    using Error::Error;
};

// File format / truncation / version problems.
struct IoError : Error {
    using Error::Error;
};

// Config file parse or validation problems; message carries key and line.
struct ConfigError : Error {
    using Error::Error;
};

// Invalid argument combinations (counts, ranges, missing classes).
struct InvalidArgument : Error {
    using Error::Error;
};

} // namespace nctta
