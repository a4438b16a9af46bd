#pragma once

#include <ostream>

namespace rbflow::cli {

enum ExitCode : int { ok = 0, usage = 1, validation = 2, numerical = 3 };

/// Runs one command line (argv[0] is the program name). Never throws.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rbflow::cli
