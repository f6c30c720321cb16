// SPDX-License-Identifier: Apache-2.0
#include "navunc_cli.hpp"

int main(int argc, char** argv) { return navunc::cli::run(argc, argv); }
