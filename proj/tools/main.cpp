#include <string>
#include <vector>

#include "conserve/cli.hpp"

int main(int argc, char** argv) {
    return conserve::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
