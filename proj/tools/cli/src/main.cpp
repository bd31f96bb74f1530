#include <iostream>

#include "taskvec_cli/cli.hpp"

int main(int argc, char** argv) {
  return taskvec::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
