#pragma once

#include <string>
#include <vector>

namespace uvmb::cli {

// Entry point for the command-line tool; args excludes argv[0].
// Exit codes: 0 success, 1 verification failure, 2 usage/config error,
// 3 numeric divergence, 4 checkpoint error.
int run(const std::vector<std::string>& args);

}  // namespace uvmb::cli
