// Command-line entry point. Subcommands are wired up in cli.hpp once the
// pipeline modules land; this stub keeps the build green meanwhile.
#include <cstdio>

int main() {
  std::fprintf(stderr, "voltran: CLI not yet wired\n");
  return 2;
}
