#include "ctrpose/cli.hpp"

int main(int argc, char** argv) {
  return ctrpose::cli::run_command(argc, argv);
}
