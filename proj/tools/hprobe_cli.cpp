#include "hprobe/cli_io.hpp"

int main(int argc, char** argv) { return hprobe::io::cli_main(argc, argv); }
