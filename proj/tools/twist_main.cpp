#include "twist/cli.hpp"

int main(int argc, char** argv) { return twist::cli::run_command(argc, argv); }
