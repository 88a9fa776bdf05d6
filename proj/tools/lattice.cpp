// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "lattice/cli.hpp"

int main(int argc, char** argv) { return lattice::run_cli(argc, argv, std::cout, std::cerr); }
