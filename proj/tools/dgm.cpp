#include "dgm/cli.hpp"

int main(int argc, char** argv) { return dgm::cli::run(argc, argv); }
