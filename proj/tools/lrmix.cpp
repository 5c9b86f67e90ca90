#include "lrmix/cli.hpp"

int main(int argc, char** argv) { return lrmix::run_cli(argc, argv); }
