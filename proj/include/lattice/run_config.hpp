// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat JSON run configuration for the CLI. Every key is optional except
// "version" (must be 1); unknown keys are rejected. Values given with
// --set key=value override the file, which overrides the defaults.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lattice/model.hpp"
#include "lattice/tasks.hpp"
#include "lattice/training.hpp"

namespace lattice {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kRunConfigVersion = 1;

struct RunConfig {
  ModelConfig model;  // model.seed is the run seed
  MqarConfig data;    // data.vocab_size mirrors model.vocab_size
  TrainConfig train;  // train.shuffle_seed mirrors the run seed

  std::size_t eval_samples = 1000;
  std::uint64_t eval_seed = 1000000;
  double min_accuracy = 0.0;  // eval exits 1 below this

  std::string dataset = "mqar.bin";
  std::string checkpoint = "model.ckpt";
  std::string metrics = "metrics.csv";
  std::string eval_out = "eval.json";
  std::string trace_out = "trace.jsonl";

  std::size_t trace_steps = 256;
  double trace_gamma = 0.5;
  double trace_mu = 1.0;

  // Throws ConfigError.
  void validate() const;
};

// Defaults with the run seed taken from LATTICE_SEED when set.
RunConfig default_run_config();

nlohmann::json run_config_to_json(const RunConfig& cfg);

// Starts from default_run_config(). Derived seeds (data_seed, eval_seed)
// follow "seed" unless given explicitly.
RunConfig run_config_from_json(const nlohmann::json& j);

// "key=value": value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Reads the file (IoError when unreadable), applies overrides, validates.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

}  // namespace lattice
