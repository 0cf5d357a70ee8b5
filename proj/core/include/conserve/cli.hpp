#pragma once

#include <string>
#include <vector>

namespace conserve {

// Command-line front end (args exclude the program name). Returns the process
// exit code: 0 on success, 1 on domain errors, 2 on IO/config/usage errors.
int run_cli(const std::vector<std::string>& args);

} // namespace conserve
