#include "atm/cli.hpp"

int main(int argc, char** argv) { return atm::cli::run_cli(argc, argv); }
