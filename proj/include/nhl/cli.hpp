#ifndef NHL_CLI_HPP
#define NHL_CLI_HPP

#include "nhl/run_config.hpp"

#include <iosfwd>
#include <string>

namespace nhl {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitRuntime = 3 };

/// Runs one command ("make-dataset", "train-source", "eval", "adapt",
/// "export-features") with a validated configuration. Progress goes to `log`.
int run_command(const std::string& command, const RunConfig& config, std::ostream& log);

/// Full command-line entry point.
int run_cli(int argc, char** argv);

}  // namespace nhl

#endif  // NHL_CLI_HPP
