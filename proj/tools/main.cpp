#include <iostream>

#include "peft_forge/cli.hpp"

int main(int argc, char** argv) { return peft::cli::run(argc, argv, std::cout, std::cerr); }
