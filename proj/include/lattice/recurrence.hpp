// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// Exact per-token orthogonal state recurrence.
//
// The state holds m memory slots s_i in R^d, stored slot-major (row i of an
// m x d matrix). Each token writes into slot i only the component of its
// driver vector h_t that is orthogonal to s_i, scaled by a writing intensity
// c_i / |s_i|, then rescales the slot back to its previous norm:
//
//   delta_i = -gamma * c_i * P(s_i) h / |s_i|,   P(s) = I - s s^T / |s|^2
//   s_i'    = beta_i * (mu * s_i + delta_i)
//   beta_i  = |s_i| / sqrt(mu^2 |s_i|^2 + |delta_i|^2)
//   y       = sum_i q_i s_i'
//
// Driver and intensity per mode (phi_i = s_i / |s_i|):
//   Dec: h = e = sum_i k_i phi_i - v,  c = k     loss 1/2 |Phi k - v|^2
//   Sim: h = -v,                       c = k     loss -<Phi k, v>
//   Enc: h = v,  c_i = phi_i . v - k_i           loss 1/2 |Phi^T v - k|^2

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lattice/tensor.hpp"

namespace lattice {

inline constexpr double kSlotEps = 1e-6;

class DegenerateStateError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

enum class Mode { Dec, Sim, Enc };

std::string_view mode_name(Mode mode);
Mode parse_mode(std::string_view name);

class StateMatrix {
 public:
  StateMatrix() = default;
  StateMatrix(std::size_t slots, std::size_t dim);
  explicit StateMatrix(Mat slots);

  std::size_t slots() const { return data_.rows(); }
  std::size_t dim() const { return data_.cols(); }

  std::span<double> slot(std::size_t i) { return data_.row(i); }
  std::span<const double> slot(std::size_t i) const { return data_.row(i); }
  double slot_norm(std::size_t i) const { return norm2(data_.row(i)); }
  Vec slot_norms() const;

  const Mat& mat() const { return data_; }
  Mat& mat() { return data_; }

  // y = sum_i q_i s_i
  Vec read(std::span<const double> q) const;

 private:
  Mat data_;
};

// Slots drawn from an isotropic Gaussian and scaled to unit norm.
StateMatrix init_state(std::size_t slots, std::size_t dim, std::uint64_t seed);

struct TokenTriple {
  Vec k;  // R^m
  Vec v;  // R^d
  Vec q;  // R^m
  double gamma = 0.0;
  double mu = 1.0;
};

struct StepTrace {
  Vec e;        // reconstruction error: R^d for Dec/Sim, R^m for Enc
  Vec h;        // driver vector, R^d
  Vec h_hat;    // s_i . h / |s_i|^2 (S^T h for unit slots)
  Vec k_hat;    // gamma * beta_i * c_i / |s_i|
  Mat delta;    // raw step -gamma * grad, before decay and rescaling
  Vec beta;     // per-slot rescaling
  double loss = 0.0;
};

// Switches for reducing the recurrence to its unnormalized ancestors.
// Disabling both turns a Dec step into the plain delta rule.
struct StepOptions {
  bool normalize_read = true;  // phi(S) in the loss; false means phi = identity
  bool retract = true;         // beta rescaling after the step
};

// h - s (s.h) / |s|^2, computed without forming the projector.
Vec project_orthogonal(std::span<const double> h, std::span<const double> s);

double compression_loss(const StateMatrix& S, const TokenTriple& t, Mode mode);

struct GradientResult {
  Mat grad;  // m x d, row i is dL/ds_i
  StepTrace trace;
};

GradientResult osr_gradient(const StateMatrix& S, const TokenTriple& t, Mode mode,
                            const StepOptions& opts = {});

struct NormalizeResult {
  StateMatrix state;
  Vec beta;
};

NormalizeResult normalize_update(const StateMatrix& prev, const Mat& delta, double mu);

struct StepResult {
  StateMatrix state;
  Vec y;
  StepTrace trace;
};

StepResult lattice_step(const StateMatrix& S, const TokenTriple& t, Mode mode,
                        const StepOptions& opts = {});

struct ScanResult {
  StateMatrix state;
  std::vector<Vec> outputs;
  std::vector<StepTrace> traces;
};

ScanResult lattice_scan(const StateMatrix& S0, std::span<const TokenTriple> tokens, Mode mode,
                        bool keep_traces = true);

double soft_threshold(double x, double tau);

// Unnormalized proximal step: Dec gradient step followed by element-wise
// shrinkage with threshold gamma * lambda.
StateMatrix ista_step(const StateMatrix& S, const TokenTriple& t, double lambda);

void check_slots(const StateMatrix& S);
void check_token(const StateMatrix& S, const TokenTriple& t);

}  // namespace lattice
