#include "all4one/cli.hpp"

int main(int argc, char** argv) { return all4one::cli_main(argc, argv); }
