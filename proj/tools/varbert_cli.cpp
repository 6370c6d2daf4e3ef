#include "varbert/cli.hpp"

int main(int argc, char** argv) { return varbert::cli::run(argc, argv); }
