#include "dgn/cli.hpp"

int main(int argc, char** argv) { return dgn::run_cli(argc, argv); }
