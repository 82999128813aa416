#include <iostream>

#include "qkdbound/cli.hpp"

int main(int argc, char** argv) { return qkdbound::cli::run(argc, argv, std::cout, std::cerr); }
