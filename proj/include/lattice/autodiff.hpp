// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// Matrix-level reverse-mode differentiation. A Tape records every operation
// eagerly (values are computed immediately) together with a closure that
// propagates the output adjoint to its inputs. Backward walks the tape in
// reverse creation order, so the reduction order is fixed and results are
// bitwise reproducible.
//
// Besides generic primitives the tape offers fused operations with
// hand-derived adjoints for the per-token recurrences, which would otherwise
// create tens of nodes per token.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <vector>

#include "lattice/recurrence.hpp"
#include "lattice/tensor.hpp"

namespace lattice::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Mat& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  // The value is copied; after backward the node's adjoint is added to *grad_sink.
  Var param(const Mat& value, Mat* grad_sink);
  // Records an op output. backward is dropped when no input needs a gradient.
  Var record(Mat value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Mat value, const std::vector<Var>& inputs, Backward backward);

  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool grad_enabled() const { return grad_enabled_; }
  // Adjoint of node id; empty until something is accumulated.
  const Mat& grad(std::size_t id) const { return nodes_[id].grad; }
  // Adds g into the adjoint of id when that node needs one.
  void accumulate(std::size_t id, const Mat& g);
  // Mutable adjoint storage, allocated on first use. Caller must check needs_grad.
  Mat& grad_buffer(std::size_t id);

  // root must be 1x1. Propagates adjoints and flushes them to parameter sinks.
  void backward(Var root, double seed = 1.0);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Mat* sink = nullptr;
    Backward backward;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

// Fault injection for negative controls: while alive, the matmul adjoint
// with respect to its left operand is scaled by 1 + kCorruptionFactor.
class ScopedCorruptAdjoint {
 public:
  ScopedCorruptAdjoint();
  ~ScopedCorruptAdjoint();
  ScopedCorruptAdjoint(const ScopedCorruptAdjoint&) = delete;
  ScopedCorruptAdjoint& operator=(const ScopedCorruptAdjoint&) = delete;

 private:
  bool previous_;
};
inline constexpr double kCorruptionFactor = 0.05;
bool adjoint_corrupted();

// ---- elementwise and linear algebra ----
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // Hadamard
Var scale(Var a, double s);
Var mul_scalar(Var a, Var s);   // s is 1x1
Var mul_rowvec(Var a, Var r);   // r is 1 x cols
Var mul_colvec(Var a, Var c);   // c is rows x 1
Var add_rowvec(Var a, Var r);
Var add_colvec(Var a, Var c);
Var add_const(Var a, double c);
Var reciprocal(Var a);
Var sigmoid(Var a);
Var silu(Var a);
Var gelu(Var a);  // exact erf form
Var square(Var a);
Var sqrt(Var a);
Var rsqrt(Var a);
Var clamp_min0(Var a);
Var row_sum(Var a);  // rows x 1
Var sum_all(Var a);  // 1 x 1

// ---- structure ----
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var embedding(Var table, const std::vector<int>& ids);
Var cumprod_rows(Var a);
Var cumsum_rows(Var a);
Var causal_mask(Var a);  // zero strictly above the diagonal

// ---- fused ----
// y = x * gain / sqrt(mean(x^2) + eps) per row; gain is 1 x cols.
Var rmsnorm(Var x, Var gain, double eps = 1e-6);
// Depthwise causal convolution with left zero padding:
// y[t,c] = sum_j w[j,c] x[t-j,c], w is width x channels.
Var causal_conv(Var x, Var w);
// Sum over masked rows of -log softmax(logits)[target].
Var masked_cross_entropy(Var logits, const std::vector<int>& targets,
                         const std::vector<bool>& mask);
// Causal softmax attention y_t = sum_{j<=t} softmax_j(q_t . k_j) v_j.
Var causal_softmax_attention(Var q, Var k, Var v);

// Exact sequential orthogonal recurrence over T tokens. K, Q: T x m,
// V: T x d, gamma, mu: T x 1. Returns T x d read-outs.
Var lattice_sequential(Var K, Var V, Var Q, Var gamma, Var mu, const Mat& S0, Mode mode);

// Linear and delta-rule recurrences in one kernel:
//   B  = diag(alpha_t) S                      (alpha absent: identity)
//   delta = false:  S' = B + k (x) v
//   delta = true:   S' = B - gamma k (x) (R k - v),  R = decay_inside ? B : S
// alpha: T x m, gamma: T x 1.
struct DeltaFamilyOptions {
  bool delta = false;
  bool decay_inside = false;
};
Var delta_family(Var K, Var V, Var Q, std::optional<Var> alpha, std::optional<Var> gamma,
                 const Mat& S0, DeltaFamilyOptions opts);

// Gated linear attention over one chunk, s_{t,n} = G_{t,n} s_{t-1,n} + K_{t,n} v_t.
// Returns the final state stacked over the read-outs: (m + C) x d.
Var gla_chunk(Var Q, Var K, Var V, Var G, Var S0);

}  // namespace lattice::ad
