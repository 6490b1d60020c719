#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dive::cli {

// Parses args (without argv[0]), assembles the effective configuration
// (defaults < config file < DIVE_* environment < flags), writes a snapshot
// into the output directory, and runs the chosen subcommand.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err);

}  // namespace dive::cli
