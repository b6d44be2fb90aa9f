#include <iostream>

#include "irstd/cli.hpp"

int main(int argc, char** argv) { return irstd::run_cli(argc, argv, std::cout, std::cerr); }
