#pragma once

#include <iosfwd>

namespace irstd {

// Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
// Run directories go under $IRSTD_OUTPUT_ROOT (default "runs") unless --out
// names one.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

// Build stamp written into every run directory.
const char* version_string();

}  // namespace irstd
