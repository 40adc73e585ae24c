#include "clipad/cli.hpp"

int main(int argc, char** argv) { return clipad::cli::run(argc, argv); }
