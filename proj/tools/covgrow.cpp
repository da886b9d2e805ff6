#include <iostream>

#include "covgrow/cli.hpp"

int main(int argc, char** argv) { return covgrow::run(argc, argv, std::cout, std::cerr); }
