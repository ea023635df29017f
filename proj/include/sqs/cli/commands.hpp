#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sqs::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;    // usage, config, format and argument errors
inline constexpr int kExitRuntime = 2;  // numeric failures, failed gradient checks

// Runs one command. args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace sqs::cli
