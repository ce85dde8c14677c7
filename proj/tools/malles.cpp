#include <iostream>
#include <string>
#include <vector>

#include "malles/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return malles::run_cli(args, std::cout, std::cerr);
}
