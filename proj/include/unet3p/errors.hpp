#pragma once

#include <stdexcept>
#include <string>

namespace unet3p {

// Error taxonomy. The CLI maps these onto exit codes, so every throw site
// picks the category deliberately.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user-facing configuration: spec files, unknown keys, invalid rates.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Spatial geometry violations: non-divisible pooling, empty conv output,
// images smaller than a loss window.
struct GeometryError : std::runtime_error {
    explicit GeometryError(const std::string& msg) : std::runtime_error(msg) {}
};

// API contract violations: non-scalar loss in backward, missing gradients,
// checkpoint/spec mismatch.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace unet3p
