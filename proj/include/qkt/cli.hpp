#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace qkt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;    // usage or configuration error
inline constexpr int kExitData = 2;     // unreadable or malformed input
inline constexpr int kExitNumeric = 3;  // non-finite loss, undefined metric

// Output root used when --out is not given: $QKT_OUTPUT_ROOT, else "qkt_runs".
std::filesystem::path default_output_root();

// Runs one command. `args` excludes the program name, e.g.
// {"train", "--interactions", "log.csv", "--qmatrix", "q.csv"}.
// `--config FILE` supplies `key = value` lines as if they were flags placed
// before the command-line ones, so the command line wins.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace qkt::cli
