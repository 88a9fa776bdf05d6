// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// Outer training loop: mean masked cross-entropy, reverse-mode gradients
// through the model (including the recurrent scans), AdamW with linear warmup
// and cosine decay, global-norm clipping, and a finite-difference checker.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lattice/model.hpp"
#include "lattice/tensor.hpp"

namespace lattice {

class TrainingFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Sequence {
  std::vector<int> tokens;
  std::vector<int> targets;  // per position; read only where mask is set
  std::vector<bool> mask;
};

struct LossAndGrad {
  double loss = 0.0;        // mean over all masked positions in the batch
  std::size_t count = 0;    // masked positions
  std::vector<Mat> grads;   // one per parameter
};

// Gradients of the mean masked cross-entropy over the whole batch. Sequences
// are processed in order, so the summation order is fixed.
LossAndGrad loss_and_grad(const Model& model, std::span<const Sequence> batch);
double batch_loss(const Model& model, std::span<const Sequence> batch);

struct OptimConfig {
  double base_lr = 3e-3;
  double final_lr = 3e-5;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 1000;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Learning rate for the 1-based step: linear warmup to base_lr, then cosine
// decay to final_lr at total_steps.
double learning_rate(const OptimConfig& cfg, std::size_t step);

struct OptState {
  OptimConfig cfg;
  std::vector<Mat> m, v;
  std::size_t step = 0;
};

OptState make_opt_state(const Model& model, const OptimConfig& cfg);

double global_norm(const std::vector<Mat>& grads);
// Scales grads so their global norm is at most clip; returns the norm before.
double clip_gradients(std::vector<Mat>& grads, double clip);

struct StepStats {
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
};

// Clips, then applies one AdamW update with decoupled weight decay on
// parameters flagged for it.
StepStats adamw_step(OptState& opt, std::vector<Parameter>& params, std::vector<Mat>& grads);

struct MetricRow {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double tokens_per_sec = 0.0;
};

struct TrainConfig {
  OptimConfig optim;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t shuffle_seed = 0;
};

// Steps per epoch times epochs; the optimizer's total_steps is taken from here.
std::size_t total_train_steps(std::size_t num_sequences, const TrainConfig& cfg);

std::vector<MetricRow> train(Model& model, std::span<const Sequence> data, const TrainConfig& cfg,
                             const std::function<void(const MetricRow&)>& on_step = {});

// Appends rows to a CSV with header step,lr,loss,grad_norm,tokens_per_sec.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::string path);
  void write(const MetricRow& row);

 private:
  std::string path_;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;

  std::string summary() const;
};

// Relative error floor: |a - b| / max(|a|, |b|, kGradCheckFloor).
inline constexpr double kGradCheckFloor = 1e-3;

// Fourth-order central differences over every parameter entry of a tiny model.
GradCheckReport grad_check(Model& model, std::span<const Sequence> batch, double tolerance,
                           double step = 1e-6, std::size_t max_params = 5000);

}  // namespace lattice
