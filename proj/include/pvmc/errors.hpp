#pragma once

#include <stdexcept>
#include <string>

namespace pvmc {

// Error taxonomy used across the toolkit. The CLI maps these onto its
// stable exit codes (config -> 2, I/O -> 1, verification -> 3).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Contract violations between data structures (dimension mismatches,
// degenerate system models).
struct ModelError : std::runtime_error {
  explicit ModelError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse (e.g. backward on a non-scalar loss).
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct VerificationError : std::runtime_error {
  explicit VerificationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace pvmc
