#include "prf/cli.hpp"

int main(int argc, char** argv) { return prf::cli_main(argc, argv); }
