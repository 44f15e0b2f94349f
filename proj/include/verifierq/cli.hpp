#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace verifierq::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int {
  kExitOk = 0,
  /// oracle-check found a violated property.
  kExitViolation = 1,
  kExitUsage = 2,
  kExitDivergence = 3,
};

/// Runs one subcommand. `args` excludes the program name. Every relative
/// path, including --config, resolves against --out-dir.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace verifierq::cli
