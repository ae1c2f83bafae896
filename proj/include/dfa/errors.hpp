#pragma once

#include <stdexcept>
#include <string>

namespace dfa {

// Shape errors carry both operand shapes so the message pinpoints the mismatch.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Bad or inconsistent experiment configuration (unknown keys, invalid combos).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File ingestion failures; message names the file and the offending location.
struct IngestError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Broken internal contract (missing trace entries, missing moment buffers).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Operation requested in a mode that does not support it.
struct ModeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

}  // namespace dfa
