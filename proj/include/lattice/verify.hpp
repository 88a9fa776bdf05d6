// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// Self-checking suites behind `lattice verify`. Each suite draws its own
// random instances from a fixed seed and compares the library against an
// independent oracle (finite differences, the sequential recurrence, or an
// explicitly materialized quantity).

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace lattice {

struct SuiteResult {
  std::string name;
  bool passed = false;
  double metric = 0.0;     // worst observed error (suite specific)
  double threshold = 0.0;  // metric must not exceed this
  std::string detail;
  double seconds = 0.0;
};

// Suite names in execution order.
const std::vector<std::string>& suite_names();

// Throws std::invalid_argument for an unknown name.
SuiteResult run_suite(std::string_view name, std::uint64_t seed = 0);

// Suites whose name contains filter (all when filter is empty). Throws
// std::invalid_argument when nothing matches.
std::vector<SuiteResult> run_suites(std::string_view filter = {}, std::uint64_t seed = 0);

// Fixed-width table, one row per suite.
std::string format_suite_table(const std::vector<SuiteResult>& results);

// Individual suites, also used by the acceptance binary.
SuiteResult verify_orthogonality(std::uint64_t seed, std::size_t draws_per_mode = 1000);
SuiteResult verify_sphere(std::uint64_t seed, std::size_t steps = 10000);
SuiteResult verify_gradient(std::uint64_t seed, std::size_t instances = 100);
SuiteResult verify_chunk_exact(std::uint64_t seed, std::size_t sequences = 100);
SuiteResult verify_beta_chunk(std::uint64_t seed, std::size_t chunks = 100);
SuiteResult verify_delta_rule(std::uint64_t seed, std::size_t steps = 100);
SuiteResult verify_objective(std::uint64_t seed, std::size_t instances = 20);
SuiteResult verify_gradcheck(std::uint64_t seed);
SuiteResult verify_normalization(std::uint64_t seed, std::size_t sequences = 20);

}  // namespace lattice
