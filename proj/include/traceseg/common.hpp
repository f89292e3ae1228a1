#pragma once

#include <stdexcept>
#include <string>

namespace traceseg {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// process exit codes: ConfigError/ShapeError -> 1, DataError -> 2,
// NumericError -> 3.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr const char* kToolName = "traceseg";
inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace traceseg
