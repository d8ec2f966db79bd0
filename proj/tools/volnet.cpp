#include <iostream>

#include "volnet/cli.hpp"

int main(int argc, char** argv) { return volnet::run_cli(argc, argv, std::cout, std::cerr); }
