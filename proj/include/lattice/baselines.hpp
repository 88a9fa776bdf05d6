// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reference recurrences that the orthogonal update is compared against, all
// in the same slot-major layout as StateMatrix: S is m x d, slot i is row i,
// a write "v k^T" adds k_i * v to slot i and z = S k means sum_i k_i s_i.
//
//   la              S' = S + k (x) v
//   mamba2          S' = mu S + k (x) v
//   gla             S' = diag(mu_vec) S + k (x) v
//   deltanet        S' = S - gamma k (x) (S k - v)
//   gated-deltanet  S' = mu S - gamma k (x) (mu S k - v)
//   rwkv7           S' = diag(mu_vec) S - gamma k (x) (S k - v)
//   ttt             S' = S - gamma k (x) J(z)^T (phi(z) - v),  z = S k
//
// Every variant reads out y = sum_i q_i s_i' from the updated state.

#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "lattice/recurrence.hpp"
#include "lattice/tensor.hpp"

namespace lattice {

enum class BaselineKind { LA, Mamba2, GLA, DeltaNet, GatedDeltaNet, RWKV7, TTT, SoftmaxRef };

std::string_view baseline_name(BaselineKind kind);
BaselineKind parse_baseline(std::string_view name);

// True for the kinds whose decay is one value per slot (mu_vec).
bool uses_slot_decay(BaselineKind kind);

// Norm offset in the TTT output normalization phi(z) = z / (|z| + eps), which
// keeps S = 0 a legal starting state.
inline constexpr double kTttEps = 1e-6;

struct BaselineScanResult {
  Mat state;
  std::vector<Vec> outputs;
};

// One token of a recurrent baseline. mu_vec is only read by the per-slot
// kinds and must then have one entry per slot.
Mat baseline_update(BaselineKind kind, const Mat& S, const TokenTriple& t,
                    std::span<const double> mu_vec = {});

// mu_vecs may be empty for kinds that do not use per-slot decay.
BaselineScanResult baseline_scan(BaselineKind kind, const Mat& S0,
                                 std::span<const TokenTriple> tokens,
                                 std::span<const Vec> mu_vecs = {});

BaselineScanResult la_scan(const Mat& S0, std::span<const TokenTriple> tokens);
BaselineScanResult mamba2_scan(const Mat& S0, std::span<const TokenTriple> tokens);
BaselineScanResult gla_scan(const Mat& S0, std::span<const TokenTriple> tokens,
                            std::span<const Vec> mu_vecs);
BaselineScanResult deltanet_scan(const Mat& S0, std::span<const TokenTriple> tokens);
BaselineScanResult gated_deltanet_scan(const Mat& S0, std::span<const TokenTriple> tokens);
BaselineScanResult rwkv7_scan(const Mat& S0, std::span<const TokenTriple> tokens,
                              std::span<const Vec> mu_vecs);
BaselineScanResult ttt_scan(const Mat& S0, std::span<const TokenTriple> tokens);

// z = sum_i k_i s_i
Vec slot_combination(const Mat& S, std::span<const double> k);

// 1/2 |phi(S k) - v|^2 and its gradient with respect to S.
double ttt_loss(const Mat& S, std::span<const double> k, std::span<const double> v);
Mat ttt_gradient(const Mat& S, std::span<const double> k, std::span<const double> v);

// Causal softmax attention without scaling:
// y_t = sum_{j<=t} softmax_j(k_j . q_t) v_j.
std::vector<Vec> softmax_attention_ref(std::span<const Vec> keys, std::span<const Vec> values,
                                       std::span<const Vec> queries);

// Each recurrent update is one online gradient step
//   S' = D(S) - eta * grad L(D(S))
// on the objective below (regularizer lambda = (1 - mu) / eta folded in).
// These expose L, D and eta so the update can be checked against a
// numerically differentiated objective.
struct OnlineObjective {
  double eta = 1.0;
  Mat decayed;  // D(S)
};

OnlineObjective baseline_objective_setup(BaselineKind kind, const Mat& S, const TokenTriple& t,
                                         std::span<const double> mu_vec = {});
double baseline_objective(BaselineKind kind, const Mat& S, const TokenTriple& t,
                          std::span<const double> mu_vec = {});

}  // namespace lattice
