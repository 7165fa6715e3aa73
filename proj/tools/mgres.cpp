#include <vector>

#include "mgres/bench.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mgres::cli_run(args);
}
