#include <iostream>

#include "tkmamba/cli.hpp"

int main(int argc, char** argv) { return tkm::run_cli(argc, argv, std::cout, std::cerr); }
