#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace caft::cli {

// Exit codes shared by every subcommand.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kConfig = 2;
inline constexpr int kIo = 3;
inline constexpr int kDivergence = 4;
inline constexpr int kMismatch = 5;

// Runs one invocation. `args` excludes the program name. Results go to
// `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// "%.3g"-like but keeps trailing zeros: 0.0588, 1.00, 12.3, 100.
std::string three_significant(double v);

}  // namespace caft::cli
