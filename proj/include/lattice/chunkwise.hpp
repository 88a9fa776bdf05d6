// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// Chunk-wise parallel approximations of the orthogonal state recurrence.
//
// Within a chunk of C tokens the gradient is frozen at the chunk-start state
// S' (its norms, directions and, for Dec/Enc, its reconstruction error), which
// makes every intra-chunk quantity a matrix product:
//
//   full form   S_t = mu beta S_{t-1} + (h~ . k^) S' - h k^^T
//   rank-one    S_t = (mu beta + h~ . k^) S_{t-1} - h k^^T
//
// with h~_{t,i} = s'_i . h_t / |s'_i|^2 and k^_{t,i} = gamma_t beta_{t,i} c_{t,i} / |s'_i|.
// At C = 1 both forms coincide with the sequential recurrence.

#pragma once

#include <span>
#include <vector>

#include "lattice/recurrence.hpp"
#include "lattice/tensor.hpp"

namespace lattice {

enum class ChunkNormalization {
  PerToken,  // beta from the chunk-level |delta|^2 identity at every step
  PerChunk,  // no rescaling inside the chunk; slot norms restored at its end
};

struct ChunkOptions {
  ChunkNormalization normalization = ChunkNormalization::PerToken;
  bool pad = true;  // right-pad with gamma=0, mu=1 no-op tokens to a multiple of C
};

struct ChunkWorkspace {
  std::size_t C = 0;
  Mat K, V, Q, H;  // C x m, C x d, C x m, C x d
  Mat Htilde;      // C x m, s'_i . h_t / |s'_i|^2
  Mat Kraw;        // C x m, c_{t,i} / |s'_i|
  Mat Khat;        // C x m, gamma_t beta_{t,i} Kraw_{t,i}
  Mat a;           // C x m, running product of beta * mu
  Tensor3 Omega;   // C x C x m, Omega(j,i,n) = a(j,n) / a(i,n) for i <= j
  Vec f;           // m, last row of F
  Mat F;           // C x m
  Mat P;           // C x C, causal
  Mat Ds;          // C x m, |delta_{t,i}|^2
  Mat beta;        // C x m
  Mat G_gate;      // C x m, rank-one gate rows
};

struct OmegaResult {
  Mat a;
  Tensor3 omega;
};

// decays: C x m entries in (0, 1].
OmegaResult build_omega(const Mat& decays);

struct BetaChunkResult {
  Mat Ds;
  Mat beta;
};

// |delta_{t,i}|^2 = gamma_t^2 Kraw^2 (|h_t|^2 - |s'_i|^2 Htilde^2), evaluated for a
// whole chunk with one row-norm pass over H, then
// beta = |s'_i| / sqrt(mu_t^2 |s'_i|^2 + Ds).
BetaChunkResult beta_chunk(const StateMatrix& chunk_start, const Mat& H, const Mat& Htilde,
                           const Mat& Kraw, std::span<const double> gamma,
                           std::span<const double> mu);

struct GlaResult {
  Mat state;  // m x d
  Mat Y;      // C x d
};

// Gated linear attention over one chunk:
//   s_{t,n} = G_{t,n} s_{t-1,n} + K_{t,n} v_t,    y_t = sum_n Q_{t,n} s_{t,n}
// evaluated in parallel form with segmented gate products and one causal
// C x C matmul.
GlaResult gla_intra_chunk(const Mat& Q, const Mat& K, const Mat& V, const Mat& G, const Mat& S0);

// Chunk-start quantities shared by both forms. Fills K, V, Q, H, Htilde,
// Kraw, Ds, beta and Khat.
ChunkWorkspace prepare_chunk(const StateMatrix& start, std::span<const TokenTriple> chunk,
                             Mode mode, ChunkNormalization norm);

struct ChunkScanResult {
  StateMatrix state;
  std::vector<Vec> outputs;
};

ChunkScanResult scan_chunkwise_full(const StateMatrix& S0, std::span<const TokenTriple> tokens,
                                    Mode mode, std::size_t C, const ChunkOptions& opts = {});

ChunkScanResult scan_chunkwise_rank1(const StateMatrix& S0, std::span<const TokenTriple> tokens,
                                     Mode mode, std::size_t C, const ChunkOptions& opts = {});

}  // namespace lattice
