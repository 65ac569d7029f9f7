#include "mscsa/cli.hpp"

int main(int argc, char** argv) { return mscsa::cli::run(argc, argv); }
