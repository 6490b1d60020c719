#include <iostream>
#include <string>
#include <vector>

#include "dive/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dive::cli::dispatch(std::move(args), std::cout, std::cerr);
}
