#pragma once

#include <string>
#include <vector>

namespace boxgen {

// Dispatches one command-line invocation. Args are in natural order without
// the program name. Returns the process exit code: 0 on success, 1 when the
// input is at fault (flags, config, file contents), 2 on runtime failure.
int run_cli(std::vector<std::string> args);

}  // namespace boxgen
