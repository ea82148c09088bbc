#include <iostream>
#include <string>
#include <vector>

#include "fptn/cli.hpp"

int main(int argc, char** argv) {
  return fptn::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
