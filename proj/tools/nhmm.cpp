#include <iostream>
#include <string>
#include <vector>

#include "nhmm/cli.hpp"

int main(int argc, char** argv) {
  return nhmm::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
