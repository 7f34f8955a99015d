#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace toan {

// Exit statuses of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;    // config, usage or I/O error
inline constexpr int kExitNumeric = 2;  // divergence or other numeric failure
inline constexpr int kExitVerify = 3;   // an oracle suite failed

// Entry point of `toan <command> ...`; args excludes the program name.
// A `--config FILE` (flat JSON keyed by flag name, or a run manifest) is
// expanded in place of the flag so later flags override it.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// git-describe-style identifier captured at configure time.
const char* build_id();

}  // namespace toan
