// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "vitptq/cli.hpp"

int main(int argc, char** argv) { return vitptq::cli_main(argc, argv, std::cout, std::cerr); }
