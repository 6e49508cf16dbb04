#include <iostream>
#include <string>
#include <vector>

#include "caft/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return caft::cli::run(args, std::cout, std::cerr);
}
