#include "nolab/cli.hpp"

int main(int argc, char** argv) { return nolab::cli::dispatch(argc, argv); }
