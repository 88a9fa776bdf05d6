// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/experiment.hpp"

#include <chrono>

namespace lattice {

std::vector<Sequence> mqar_sequences(const std::vector<MqarSample>& samples) {
  std::vector<Sequence> out;
  out.reserve(samples.size());
  for (const MqarSample& s : samples) out.push_back({s.tokens, dense_targets(s), s.target_mask});
  return out;
}

double mqar_evaluate(const Model& model, const std::vector<MqarSample>& samples) {
  std::vector<Mat> logits;
  logits.reserve(samples.size());
  for (const MqarSample& s : samples) logits.push_back(model.logits(s.tokens));
  return mqar_accuracy(logits, samples);
}

MqarConfig eval_task(const RunConfig& cfg) {
  MqarConfig e = cfg.data;
  e.num_samples = cfg.eval_samples;
  e.seed = cfg.eval_seed;
  return e;
}

MqarExperiment run_mqar_experiment(const RunConfig& cfg,
                                   const std::function<void(const MetricRow&)>& on_step) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<Sequence> data = mqar_sequences(mqar_generate(cfg.data));
  Model model(cfg.model);
  MqarExperiment out;
  const auto rows = train(model, data, cfg.train, on_step);
  out.steps = rows.size();
  if (!rows.empty()) out.final_loss = rows.back().loss;
  out.accuracy = mqar_evaluate(model, mqar_generate(eval_task(cfg)));
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace lattice
