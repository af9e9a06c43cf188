#include "pucci/cli.hpp"

int main(int argc, char** argv) { return pucci::cli::run(argc, argv); }
