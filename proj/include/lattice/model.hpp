// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// A small language model around the recurrent mixers:
//
//   embed -> n_blocks x [ x + W_o (GeLU(xn W_g) * mixer(xn)) ] -> rmsnorm -> head
//
// where xn = rmsnorm(x) and the mixer projects q/k through a (shared) linear
// map followed by two depthwise causal convolutions and an activation, v
// through a plain linear map, and the step size gamma and decay mu through
// sigmoid gates. Each head runs its own recurrence.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "lattice/autodiff.hpp"
#include "lattice/baselines.hpp"
#include "lattice/recurrence.hpp"
#include "lattice/tensor.hpp"

namespace lattice {

enum class ScanKind { Sequential, ChunkFull, ChunkRank1 };

std::string_view scan_kind_name(ScanKind kind);
ScanKind parse_scan_kind(std::string_view name);

enum class MixerFamily { Lattice, Baseline };

struct MixerSpec {
  MixerFamily family = MixerFamily::Lattice;
  Mode mode = Mode::Dec;                       // lattice only
  BaselineKind baseline = BaselineKind::LA;    // baseline only

  bool uses_gamma() const;
  bool uses_mu() const;
  bool slot_decay() const;       // mu has one entry per slot
  bool unit_init_state() const;  // S0 drawn on the unit sphere instead of zero
  std::string name() const;
};

// Accepts the CLI names: la, mamba2, gla, deltanet, gated-deltanet, rwkv7,
// ttt, softmax, lattice-dec, lattice-sim, lattice-enc.
MixerSpec parse_mixer(std::string_view name);

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 1;
  std::size_t m = 32;
  std::size_t d_head = 32;
  std::size_t conv_width = 4;
  std::string mixer = "lattice-dec";
  ScanKind scan = ScanKind::Sequential;
  std::size_t chunk_size = 1;
  bool shared_qk = true;
  bool tie_embeddings = false;
  std::string qk_activation = "silu";  // silu | identity
  std::uint64_t seed = 0;

  // Throws std::invalid_argument on inconsistent settings.
  void validate() const;
};

struct Parameter {
  std::string name;
  Mat value;
  bool weight_decay = true;  // false for gains and biases
};

class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const MixerSpec& mixer() const { return mixer_; }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  Parameter& param(std::string_view name);
  const Parameter& param(std::string_view name) const;
  std::size_t parameter_count() const;

  // Fixed initial states, one per (block, head), m x d_head.
  const std::vector<Mat>& initial_states() const { return s0_; }
  std::vector<Mat>& initial_states() { return s0_; }

  // Records the forward pass on tape and returns T x vocab logits. When
  // grads is given it must hold one zero-initialized Mat per parameter, and
  // tape.backward() adds into it.
  ad::Var forward(ad::Tape& tape, const std::vector<int>& ids, std::vector<Mat>* grads) const;

  // Output of block b for input x (T x d_model), recorded on tape.
  ad::Var block_forward(ad::Tape& tape, std::size_t b, ad::Var x,
                        const std::vector<ad::Var>& pv) const;

  // Gradient-free forward.
  Mat logits(const std::vector<int>& ids) const;

  std::vector<Mat> zero_grads() const;

 private:
  ad::Var run_head(ad::Tape& tape, ad::Var q, ad::Var k, ad::Var v, ad::Var gamma, ad::Var mu,
                   const Mat& S0) const;
  std::size_t index_of(std::string_view name) const;
  void add_param(std::string name, Mat value, bool decay);

  ModelConfig cfg_;
  MixerSpec mixer_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::vector<Mat> s0_;
};

std::size_t expected_parameter_count(const ModelConfig& cfg);

// Chunk-wise forms of the orthogonal recurrence recorded on a tape, used as
// differentiable model components (gradients are those of the approximation).
ad::Var lattice_chunk_full(ad::Tape& tape, ad::Var K, ad::Var V, ad::Var Q, ad::Var gamma,
                           ad::Var mu, const Mat& S0, Mode mode, std::size_t C);
ad::Var lattice_chunk_rank1(ad::Tape& tape, ad::Var K, ad::Var V, ad::Var Q, ad::Var gamma,
                            ad::Var mu, const Mat& S0, Mode mode, std::size_t C);
// Output-normalized test-time-training recurrence, composed per token.
ad::Var ttt_sequential(ad::Tape& tape, ad::Var K, ad::Var V, ad::Var Q, ad::Var gamma,
                       const Mat& S0);

}  // namespace lattice
