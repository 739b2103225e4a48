// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef LISA_CLI_HPP
#define LISA_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace lisa {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitConfig = 2, kExitNumeric = 3 };

/// Runs one subcommand. argv[0] is the program name. Output goes to `out`,
/// diagnostics to `err`.
int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace lisa

#endif  // LISA_CLI_HPP
