#include "abft/commands.hpp"

int main(int argc, char** argv) { return abft::run_cli(argc, argv); }
