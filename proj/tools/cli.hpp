#pragma once

#include <iosfwd>

namespace ehpe::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kInternal = 1;  // broken invariant (freeze, reproducibility)
inline constexpr int kUsage = 2;
inline constexpr int kData = 3;
inline constexpr int kNumeric = 4;

inline constexpr const char* kToolVersion = "0.1.0";

/// Entry point behind the ehpe executable. Output goes to `out`, diagnostics
/// to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ehpe::cli
