#ifndef VOLNET_CLI_HPP
#define VOLNET_CLI_HPP

#include <iosfwd>

#include "volnet/error.hpp"

namespace volnet {

// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitIo = 3, kExitNumeric = 4 };

int exit_code_for(ErrorCode code);

// Runs `volnet <command> ...`; argv[0] is the program name.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace volnet

#endif
