#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace metaicl {

// Runs the `metaicl` command line (args exclude the program name) and
// returns the process exit code: 0 ok, 2 bad config or data, 3 numerical
// failure, 4 I/O failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace metaicl
