// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>

namespace faceshape {

/**
 * Entry point of the command-line tool. Returns 0 on success, 1 after printing a single
 * `error: <kind>: <message>` line to `err`, and 2 on a usage error.
 */
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace faceshape
