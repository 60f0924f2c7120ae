#pragma once

// The command-line surface. run_command parses argv without the program name
// and returns the exit status of one subcommand. Errors are printed to `err`
// as one JSON record and also saved as error.json in the output directory
// when one was resolved.

#include <ostream>
#include <string>
#include <vector>

namespace crl {

// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "CRL_OUTPUT_ROOT";

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace crl
