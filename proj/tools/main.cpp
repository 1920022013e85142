#include "gsebo/cli.hpp"

int main(int argc, char** argv) { return gsebo::cli::run(argc, argv); }
