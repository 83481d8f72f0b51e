#pragma once

#include <filesystem>
#include <iosfwd>

namespace ekrmle {

// Command-line entry point shared by the `ekrmle` binary and tests.
// Subcommands: convergence, smoothing, reduce, posterior, selftest.
// Returns a process exit code: 0 on success, 1 on validation/usage errors,
// 2 on numerical failures.
int cli_main(int argc, const char* const* argv);

// Runs the built-in invariant checks with a fixed seed, printing one line
// per check to `log` and writing `selftest.csv` (plus scratch run
// directories) under `out_dir`. Returns 0 when every check passes, 2
// otherwise. The output bytes are deterministic.
int run_selftest(const std::filesystem::path& out_dir, std::ostream& log);

}  // namespace ekrmle
