#include <iostream>

#include "rubricrefine/cli.hpp"

int main(int argc, char** argv) { return rubricrefine::run_cli(argc, argv, std::cout, std::cerr); }
