#include <string>
#include <vector>

#include "boxgen/cli.hpp"

int main(int argc, char** argv) {
  return boxgen::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
