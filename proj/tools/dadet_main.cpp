#include <iostream>

#include "dadet/cli.hpp"

int main(int argc, char** argv) {
  return dadet::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
