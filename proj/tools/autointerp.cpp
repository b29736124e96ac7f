#include <iostream>

#include "autointerp/cli.hpp"

int main(int argc, char** argv) { return autointerp::cli::run(argc, argv, std::cout, std::cerr); }
