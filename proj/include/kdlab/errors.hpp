#pragma once

#include <stdexcept>
#include <string>

namespace kdlab {

// Error taxonomy. Everything user-facing derives from Error so the CLI can
// catch one type and map it to a diagnostic + nonzero exit code.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/extent mismatches between tensors or between a tensor and a model.
struct DimensionError : Error {
    using Error::Error;
};

// Bad hyperparameter values (tau <= 0, fraction outside (0,1], ...).
struct ParameterError : Error {
    using Error::Error;
};

// Malformed or inconsistent input data (labels out of range, NaN inputs, ...).
struct DataError : Error {
    using Error::Error;
};

// API contract violations (non-scalar loss, missing gradient, gradient
// reaching a frozen network, ...).
struct ContractError : Error {
    using Error::Error;
};

// Invalid experiment configuration (unknown model kind, class-count
// mismatch, unknown config key, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Checkpoint file problems: wrong magic, version mismatch, truncation.
struct CheckpointError : Error {
    using Error::Error;
};

// Binary/text file parse failures (IDX headers, tensor files, metrics).
struct ParseError : Error {
    using Error::Error;
};

}  // namespace kdlab
