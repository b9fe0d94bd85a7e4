#include <iostream>

#include "mpjudge/cli.hpp"

int main(int argc, char** argv) { return mpjudge::cli_main(argc, argv, std::cout, std::cerr); }
