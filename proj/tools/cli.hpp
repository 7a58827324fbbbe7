#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ki67::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitUsage = 2;

/// Runs the `ki67` command line. `args` excludes the program name. Data goes to
/// files or `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ki67::cli
