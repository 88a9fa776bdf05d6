// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// MQAR training and evaluation shared by the CLI and the acceptance run.

#pragma once

#include <functional>
#include <vector>

#include "lattice/model.hpp"
#include "lattice/run_config.hpp"
#include "lattice/tasks.hpp"
#include "lattice/training.hpp"

namespace lattice {

std::vector<Sequence> mqar_sequences(const std::vector<MqarSample>& samples);

// Accuracy of argmax(logits) at the target positions.
double mqar_evaluate(const Model& model, const std::vector<MqarSample>& samples);

// Held-out samples for cfg: same task shape, eval_samples drawn from eval_seed.
MqarConfig eval_task(const RunConfig& cfg);

struct MqarExperiment {
  double accuracy = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
  double seconds = 0.0;
};

// Generates the training set, trains a fresh model and evaluates it on the
// held-out set.
MqarExperiment run_mqar_experiment(const RunConfig& cfg,
                                   const std::function<void(const MetricRow&)>& on_step = {});

}  // namespace lattice
