#include "fhrl/cli.hpp"

int main(int argc, char** argv) { return fhrl::cli::main(std::vector<std::string>(argv + 1, argv + argc)); }
