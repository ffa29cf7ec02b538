#include "tsgdebias/cli.hpp"

int main(int argc, char** argv) { return tsgdb::cli::run(argc, argv); }
