#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace clipad::cli {

/// Exit codes of the command-line tool.
enum ExitCode : int { kOk = 0, kValidation = 1, kIo = 2 };

/// Runs one command line (without the program name). Normal output goes to
/// `out`, diagnostics and usage text to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, const char* const* argv);

}  // namespace clipad::cli
