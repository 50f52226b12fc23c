#pragma once

#include <string>
#include <vector>

namespace taskemb::cli {

// Parses and executes one CLI invocation (arguments without the program
// name). Returns the process exit code: 0 on success, 2 on usage errors,
// 1 on runtime failures (which are printed as `error: ...` on stderr).
int run_cli(std::vector<std::string> args);

}  // namespace taskemb::cli
