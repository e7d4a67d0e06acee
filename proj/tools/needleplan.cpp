#include "needleplan/cli.hpp"

int main(int argc, char** argv) { return needleplan::cli_main(argc, argv); }
