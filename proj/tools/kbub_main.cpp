#include "kbub/cli.hpp"

int main(int argc, char** argv) { return kbub::cli::run(argc, argv); }
