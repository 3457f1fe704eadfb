#pragma once

#include <exception>

namespace hwids::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kDataError = 2,
  kNoFeasible = 3,
  kIoError = 4,
};

/// Entry point of the `hwids` tool; returns the process exit code.
int run(int argc, char** argv);

/// Exit code for an exception escaping a subcommand.
int exit_code_for(const std::exception& e);

}  // namespace hwids::cli
