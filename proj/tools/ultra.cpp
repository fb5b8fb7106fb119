#include "ultra_cli.hpp"

int main(int argc, char** argv) { return ultra::cli::run(argc, argv); }
