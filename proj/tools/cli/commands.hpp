// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>

namespace cbe::cli {

/// Parses arguments and runs one subcommand. Returns the process exit code:
/// 0 success, 2 config or usage error, 3 data error, 4 numeric divergence.
/// Errors go to `err` as a single `error kind=<...> message=<...>` line.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cbe::cli
