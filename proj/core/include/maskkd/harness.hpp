#pragma once

#include <iosfwd>

namespace maskkd {

// Exit codes of the command-line interface.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Entry point of the `maskkd` tool. Subcommands: gen-corpus, train-teacher,
// distill, self-distill, ablate, analyze. Normal output goes to `out`,
// diagnostics and usage text to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace maskkd
