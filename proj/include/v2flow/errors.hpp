#pragma once

#include <stdexcept>
#include <string>

namespace v2flow {

// Shape/dimension mismatch between operands.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration value (bad hyperparameter, unknown key, ...).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A caller violated an operation's contract (non-scalar loss, t outside [0,1], ...).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf produced by a forward operation.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input file; carries the byte offset where parsing failed.
struct ParseError : std::runtime_error {
    ParseError(const std::string& msg, long byte_offset)
        : std::runtime_error(msg + " (byte " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    long offset;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint integrity failures; kept distinct so callers can tell them apart.
struct CrcError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct VersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace v2flow
