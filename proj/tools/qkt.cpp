#include <iostream>
#include <string>
#include <vector>

#include "qkt/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return qkt::cli::run(args, std::cout, std::cerr);
}
