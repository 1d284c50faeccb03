#pragma once

#include <string>
#include <vector>

namespace dcar::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

// Parses and runs one command line; never throws. args excludes argv[0].
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

}  // namespace dcar::cli
