// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace faceshape {

enum class ErrorKind {
    InvalidArgument,
    DegenerateGeometry,
    Underdetermined,
    NumericalFailure,
    Parse,
    Io,
    VersionMismatch,
    Corruption,
    InvariantViolation,
};

/// Stable machine-readable name, e.g. "degenerate-geometry".
std::string_view to_string(ErrorKind kind) noexcept;

/**
 * The single exception type thrown by the library. Callers that need to branch on the failure
 * mode inspect kind(); the CLI prints it as the first field of its one-line error message.
 */
class Error : public std::runtime_error
{
public:
    Error(ErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline void require(bool condition, ErrorKind kind, const std::string& message)
{
    if (!condition) {
        throw Error(kind, message);
    }
}

} // namespace faceshape
