#include <iostream>

#include "polyflow/harness.hpp"

int main(int argc, char** argv) { return polyflow::cli_main(argc, argv, std::cout, std::cerr); }
