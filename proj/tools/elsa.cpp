#include "elsa/pipeline.hpp"

#include <iostream>

int main(int argc, char** argv) { return elsa::run_cli(argc, argv, std::cout, std::cerr); }
