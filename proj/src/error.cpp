// SPDX-License-Identifier: Apache-2.0
#include "faceshape/error.hpp"

namespace faceshape {

std::string_view to_string(ErrorKind kind) noexcept
{
    switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::DegenerateGeometry: return "degenerate-geometry";
    case ErrorKind::Underdetermined: return "underdetermined";
    case ErrorKind::NumericalFailure: return "numerical-failure";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Io: return "io";
    case ErrorKind::VersionMismatch: return "version-mismatch";
    case ErrorKind::Corruption: return "corruption";
    case ErrorKind::InvariantViolation: return "invariant-violation";
    }
    return "unknown";
}

} // namespace faceshape
