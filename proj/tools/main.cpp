#include <iostream>

#include "bob/cli.hpp"

int main(int argc, char** argv) { return bob::cli::run(argc, argv, std::cout, std::cerr); }
