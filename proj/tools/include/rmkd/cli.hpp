#pragma once

#include <ostream>

namespace rmkd {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumerical = 4;

// Entry point of the rmkd executable. Output goes to `out`, diagnostics to
// `err`; the return value is the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rmkd
