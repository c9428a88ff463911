#include <iostream>

#include "msmm/cli.hpp"

int main(int argc, char** argv) { return msmm::cli::run(argc, argv, std::cout, std::cerr); }
