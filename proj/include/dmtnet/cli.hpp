#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace dmtnet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Output root used when a subcommand gets no --out.
inline constexpr const char* kOutputRootEnv = "DMTNET_OUTPUT_ROOT";

/// Entry point shared by the `dmtnet` binary and the tests. `args` excludes
/// the program name. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// FNV-1a 64 of a file's bytes as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

}  // namespace dmtnet::cli
