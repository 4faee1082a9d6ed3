#include "amen/cli.hpp"

int main(int argc, char** argv) { return amen::cli::dispatch(argc, argv); }
