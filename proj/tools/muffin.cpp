#include "muffin/cli.hpp"

int main(int argc, char** argv) { return muffin::cli::run(argc, argv); }
