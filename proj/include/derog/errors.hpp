#pragma once

#include <stdexcept>

namespace derog {

// Dimension/shape violations (op name + offending shapes in the message).
struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// API misuse: double backward, cross-tape losses, bad eps, ...
struct usage_error : std::logic_error {
    using std::logic_error::logic_error;
};

// Bad configuration values, unknown kinds/keys/flags.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Unreadable/malformed input files.
struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Semantic violations in otherwise well-formed values (bad edge index,
// probability row not summing to 1, label out of range, ...).
struct validation_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite losses and friends.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace derog
