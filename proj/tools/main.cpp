#include "ekrmle/cli.hpp"

int main(int argc, char** argv) { return ekrmle::cli_main(argc, argv); }
