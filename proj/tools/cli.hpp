#pragma once

#include <ostream>

namespace msholo {

// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitRuntime = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitIo = 4,
  kExitDivergence = 5,
};

// Runs the tool. Failures print one line
//   error: code=<kind> message="<text>"
// to `err` and return the matching exit code.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace msholo
