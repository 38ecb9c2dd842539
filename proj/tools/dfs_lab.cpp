#include "dfs/cli.hpp"

int main(int argc, char** argv) { return dfs::run_cli(argc, argv); }
