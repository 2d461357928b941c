#pragma once

#include <stdexcept>
#include <string>

namespace uvmb {

// Shape/dimension mismatches between tensors or between a tensor and an op's contract.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid user-facing configuration (CLI flags, JSON config, model sizes).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint file problems: bad magic, truncated blob, manifest mismatch.
struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric divergence: non-finite loss, domain violations (e.g. nonpositive timescale).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// File I/O failures outside checkpoints (PNG, CSV, dataset directories).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace uvmb
