#include <iostream>

#include "rmkd/cli.hpp"

int main(int argc, char** argv) { return rmkd::run_cli(argc, argv, std::cout, std::cerr); }
