#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rvos::cli {

/// Runs one command line (argv[0] is the program name) and returns the process exit code:
/// 0 success, 2 usage error, 3 data error, 4 numeric failure.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace rvos::cli
