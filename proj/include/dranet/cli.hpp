// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dranet {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitData = 2, kExitNumeric = 3 };

/// Runs the tool with `args` (without the program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dranet
