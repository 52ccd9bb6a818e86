#pragma once
#include <stdexcept>
#include <string>

namespace kvcar {

// Shape or extent mismatch between operands.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Non-finite values, degenerate ranges, divergence.
struct NumericsError : std::runtime_error {
    explicit NumericsError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration, flags, or missing prerequisites.
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// File read/write failures and malformed containers.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Violated internal invariants (e.g. alias source shorter than its reader).
struct ConsistencyError : std::logic_error {
    explicit ConsistencyError(const std::string& what) : std::logic_error(what) {}
};

} // namespace kvcar
