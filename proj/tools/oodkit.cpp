// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "oodkit/cli.hpp"

int main(int argc, char** argv) { return oodkit::cli::run(argc, argv, std::cout, std::cerr); }
