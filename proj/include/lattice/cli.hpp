// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
//   lattice verify [--filter S] [--seed N]
//   lattice mqar gen|train|eval [--config F] [--set key=value ...]
//   lattice trace [--config F] [--set key=value ...] [--out F]
//   lattice bench [--grid "T=1024,4096;d=64;m=64;C=16;kind=sequential,chunk-full"] [--out F]

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace lattice {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitIo = 3,
};

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct BenchPoint {
  std::string kind;  // sequential | chunk-full | chunk-rank1
  std::size_t T = 0, d = 0, m = 0, C = 1;
};

// "T=1024,4096;d=64;m=64;C=1,16;kind=sequential,chunk-full". Missing keys
// take the defaults T=1024, d=64, m=64, C=16 and all three kinds.
// Sequential points ignore C and appear once.
std::vector<BenchPoint> parse_bench_grid(const std::string& spec);

}  // namespace lattice
