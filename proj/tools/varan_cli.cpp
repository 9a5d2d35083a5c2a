#include <iostream>
#include <string>
#include <vector>

#include "varan/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return varan::cli::run(args, std::cout, std::cerr);
}
