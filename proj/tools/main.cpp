#include "cli.hpp"

int main(int argc, char** argv) { return merlin::cli::run(argc, argv); }
