#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dadet {

inline constexpr const char* kToolVersion = "0.1.0";

// Process exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;  // selfcheck found a failing check
inline constexpr int kExitConfig = 2;       // bad flags or config values
inline constexpr int kExitIo = 3;           // missing or unwritable files
inline constexpr int kExitDiverged = 4;     // non-finite training loss

// Full command-line driver; args excludes the program name. Streams receive
// exactly what a terminal user would see, so tests can run commands
// in-process and capture the output.
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

}  // namespace dadet
