#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mim {

// Exit codes of the `mim` tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitIo = 4,
};

// Entry point of the `mim` tool; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mim
