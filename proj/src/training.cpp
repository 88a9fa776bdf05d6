// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "lattice/io.hpp"

namespace lattice {

namespace {

std::size_t masked_count(std::span<const Sequence> batch) {
  std::size_t n = 0;
  for (const Sequence& s : batch) n += static_cast<std::size_t>(std::count(s.mask.begin(), s.mask.end(), true));
  return n;
}

}  // namespace

LossAndGrad loss_and_grad(const Model& model, std::span<const Sequence> batch) {
  LossAndGrad out;
  out.grads = model.zero_grads();
  out.count = masked_count(batch);
  if (out.count == 0) throw std::invalid_argument("loss_and_grad: batch has no target positions");
  const double inv = 1.0 / static_cast<double>(out.count);
  for (const Sequence& s : batch) {
    ad::Tape tape;
    const ad::Var logits = model.forward(tape, s.tokens, &out.grads);
    const ad::Var loss = ad::masked_cross_entropy(logits, s.targets, s.mask);
    out.loss += loss.value()(0, 0) * inv;
    tape.backward(loss, inv);
  }
  const auto& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!out.grads[i].all_finite()) throw TrainingFault("non-finite gradient for " + params[i].name);
  }
  return out;
}

double batch_loss(const Model& model, std::span<const Sequence> batch) {
  const std::size_t count = masked_count(batch);
  if (count == 0) throw std::invalid_argument("batch_loss: batch has no target positions");
  double total = 0.0;
  for (const Sequence& s : batch) {
    ad::Tape tape(false);
    total += ad::masked_cross_entropy(model.forward(tape, s.tokens, nullptr), s.targets, s.mask)
                 .value()(0, 0);
  }
  return total / static_cast<double>(count);
}

double learning_rate(const OptimConfig& cfg, std::size_t step) {
  if (step == 0) step = 1;
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.total_steps <= cfg.warmup_steps) return cfg.base_lr;
  const double progress = std::min(
      1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps));
  return cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1.0 + std::cos(M_PI * progress));
}

OptState make_opt_state(const Model& model, const OptimConfig& cfg) {
  OptState s;
  s.cfg = cfg;
  s.m = model.zero_grads();
  s.v = model.zero_grads();
  return s;
}

double global_norm(const std::vector<Mat>& grads) {
  double acc = 0.0;
  for (const Mat& g : grads)
    for (double x : g.storage()) acc += x * x;
  return std::sqrt(acc);
}

double clip_gradients(std::vector<Mat>& grads, double clip) {
  const double norm = global_norm(grads);
  if (clip > 0.0 && norm > clip) {
    const double s = clip / norm;
    for (Mat& g : grads) g *= s;
  }
  return norm;
}

StepStats adamw_step(OptState& opt, std::vector<Parameter>& params, std::vector<Mat>& grads) {
  if (grads.size() != params.size() || opt.m.size() != params.size()) {
    throw ShapeError("adamw_step: parameter/gradient/moment counts differ");
  }
  StepStats st;
  st.grad_norm = clip_gradients(grads, opt.cfg.clip_norm);
  opt.step += 1;
  st.lr = learning_rate(opt.cfg, opt.step);
  const double b1 = opt.cfg.beta1, b2 = opt.cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Mat& w = params[p].value;
    const Mat& g = grads[p];
    if (!g.same_shape(w)) throw ShapeError("adamw_step: gradient shape for " + params[p].name);
    const double decay = params[p].weight_decay ? opt.cfg.weight_decay : 0.0;
    double* m = opt.m[p].data();
    double* v = opt.v[p].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.data()[i];
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + opt.cfg.eps);
      w.data()[i] -= st.lr * (upd + decay * w.data()[i]);
    }
    if (!w.all_finite()) throw TrainingFault("non-finite update for " + params[p].name);
  }
  return st;
}

std::size_t total_train_steps(std::size_t num_sequences, const TrainConfig& cfg) {
  if (cfg.batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  return cfg.epochs * ((num_sequences + cfg.batch_size - 1) / cfg.batch_size);
}

std::vector<MetricRow> train(Model& model, std::span<const Sequence> data, const TrainConfig& cfg,
                             const std::function<void(const MetricRow&)>& on_step) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  OptimConfig oc = cfg.optim;
  oc.total_steps = total_train_steps(data.size(), cfg);
  OptState opt = make_opt_state(model, oc);
  std::vector<MetricRow> rows;
  std::vector<std::size_t> order(data.size());
  std::vector<Sequence> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.shuffle_seed * 1000003ULL + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto t0 = std::chrono::steady_clock::now();
      batch.clear();
      std::size_t tokens = 0;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        batch.push_back(data[order[i]]);
        tokens += data[order[i]].tokens.size();
      }
      LossAndGrad lg = loss_and_grad(model, batch);
      const StepStats st = adamw_step(opt, model.params(), lg.grads);
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      MetricRow row{opt.step, st.lr, lg.loss, st.grad_norm,
                    secs > 0.0 ? static_cast<double>(tokens) / secs : 0.0};
      rows.push_back(row);
      if (on_step) on_step(row);
    }
  }
  return rows;
}

MetricsWriter::MetricsWriter(std::string path) : path_(std::move(path)) {
  std::error_code ec;
  const bool fresh = !std::filesystem::exists(path_, ec) || std::filesystem::file_size(path_, ec) == 0;
  if (fresh) {
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot open metrics file " + path_);
    out << "step,lr,loss,grad_norm,tokens_per_sec\n";
  }
}

void MetricsWriter::write(const MetricRow& r) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot append to metrics file " + path_);
  out.precision(10);
  out << r.step << ',' << r.lr << ',' << r.loss << ',' << r.grad_norm << ',' << r.tokens_per_sec << '\n';
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " max rel error " << max_rel_error << " (tolerance " << tolerance
     << ")";
  std::vector<GradCheckEntry> worst = entries;
  std::sort(worst.begin(), worst.end(),
            [](const auto& a, const auto& b) { return a.max_rel_error > b.max_rel_error; });
  for (std::size_t i = 0; i < std::min<std::size_t>(3, worst.size()); ++i) {
    const auto& e = worst[i];
    os << "\n  " << e.name << "[" << e.worst_index << "] rel " << e.max_rel_error << " analytic "
       << e.analytic << " numeric " << e.numeric;
  }
  return os.str();
}

GradCheckReport grad_check(Model& model, std::span<const Sequence> batch, double tolerance,
                           double step, std::size_t max_params) {
  if (model.parameter_count() > max_params) {
    throw std::invalid_argument("grad_check: model has " + std::to_string(model.parameter_count()) +
                                " parameters, limit is " + std::to_string(max_params));
  }
  const LossAndGrad lg = loss_and_grad(model, batch);
  GradCheckReport rep;
  rep.tolerance = tolerance;
  auto& params = model.params();
  for (std::size_t p = 0; p < params.size(); ++p) {
    GradCheckEntry e;
    e.name = params[p].name;
    for (std::size_t i = 0; i < params[p].value.size(); ++i) {
      double& w = params[p].value.data()[i];
      const double saved = w;
      // Fourth-order central stencil: the rmsnorm after a small-scale embedding
      // has enough curvature that the two-point truncation error reaches 1e-5.
      auto at = [&](double offset) {
        w = saved + offset;
        return batch_loss(model, batch);
      };
      const double d1 = at(step) - at(-step);
      const double d2 = at(2.0 * step) - at(-2.0 * step);
      w = saved;
      const double numeric = (8.0 * d1 - d2) / (12.0 * step);
      const double analytic = lg.grads[p].data()[i];
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
      if (rel > e.max_rel_error || i == 0) {
        e.max_rel_error = std::max(e.max_rel_error, rel);
        if (rel >= e.max_rel_error) {
          e.worst_index = i;
          e.analytic = analytic;
          e.numeric = numeric;
        }
      }
    }
    rep.max_rel_error = std::max(rep.max_rel_error, e.max_rel_error);
    rep.entries.push_back(e);
  }
  rep.passed = rep.max_rel_error <= tolerance;
  return rep;
}

}  // namespace lattice
