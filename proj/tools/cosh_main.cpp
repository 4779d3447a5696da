#include <cstdio>

int main() {
  std::puts("cosh: pipeline CLI (subcommands wired up in pipeline.hpp)");
  return 0;
}
