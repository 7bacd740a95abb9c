#include <iostream>
#include <string>
#include <vector>

#include "navseg/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return navseg::cli_dispatch(args, std::cout, std::cerr);
}
