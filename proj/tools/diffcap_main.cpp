#include "diffcap/cli.hpp"

int main(int argc, char** argv) { return diffcap::cli_main(argc, argv); }
