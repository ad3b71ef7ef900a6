#pragma once

#include <ostream>

namespace ulsam {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the `ulsam` command; writes to `out`/`err` instead of
/// the process streams so it can be driven from tests.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ulsam
