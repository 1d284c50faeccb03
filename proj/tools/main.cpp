#include "commands.hpp"

int main(int argc, char** argv) { return dcar::cli::run(argc, argv); }
