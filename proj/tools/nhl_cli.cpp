#include "nhl/cli.hpp"

int main(int argc, char** argv) { return nhl::run_cli(argc, argv); }
