#include <iostream>
#include <string>
#include <vector>

#include "metaicl/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return metaicl::run_cli(args, std::cout, std::cerr);
}
