#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace hide {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Entry point behind the `hide` executable. Writes normal output to `out` and diagnostics
/// to `err`; returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hide
