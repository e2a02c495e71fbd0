#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace far {

/// Runs one subcommand. `args` excludes the program name. Returns 0 on
/// success, 2 on usage errors and 1 when the pipeline fails.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace far
