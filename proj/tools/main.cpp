#include <vector>

#include "uvmb/cli.hpp"

int main(int argc, char** argv) {
    return uvmb::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
