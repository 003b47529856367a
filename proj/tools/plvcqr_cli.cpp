#include "plvcqr/cli.hpp"

int main(int argc, char** argv) { return plvcqr::cli::run(argc, argv); }
