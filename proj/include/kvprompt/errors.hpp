#pragma once

#include <stdexcept>
#include <string>

namespace kvp {

// Shape/dimension mismatches between tensors or between data and config.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration (bad divisibility, empty grids, ...).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed external input (IDX/PGM/JSON files). Messages carry byte offsets
// where the format makes that meaningful.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf where finite values are required; also raised on NaN loss aborts.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace kvp
