#include "hwids/cli.hpp"

int main(int argc, char** argv) { return hwids::cli::run(argc, argv); }
