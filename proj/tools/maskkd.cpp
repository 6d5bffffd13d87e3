#include <iostream>

#include "maskkd/harness.hpp"

int main(int argc, char** argv) { return maskkd::run_cli(argc, argv, std::cout, std::cerr); }
