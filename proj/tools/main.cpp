// SPDX-License-Identifier: Apache-2.0
#include "faceshape/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return faceshape::run_cli(argc, argv, std::cout, std::cerr); }
