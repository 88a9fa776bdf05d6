// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-query associative recall (MQAR).
//
// Vocabulary layout: id 0 is the query marker "?", then a key range, a value
// range of the same size, and a filler range (at least one id, about an
// eighth of the usable ids). A sample of length L with N pairs reads
//
//   k1 v1 k2 v2 ... kN vN  [N query pairs (k, ?) shuffled among L - 4N fillers]
//
// Keys are distinct within a sample, values are drawn with replacement, every
// key is queried exactly once, and the target at each "?" is the key's value.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lattice/tensor.hpp"

namespace lattice {

struct MqarConfig {
  std::size_t vocab_size = 64;
  std::size_t seq_len = 64;
  std::size_t num_kv_pairs = 4;
  std::size_t num_samples = 5000;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument when no sample can be laid out.
  void validate() const;
};

struct MqarVocab {
  int query = 0;
  int key_begin = 0, key_end = 0;  // [begin, end)
  int value_begin = 0, value_end = 0;
  int filler_begin = 0, filler_end = 0;
};

MqarVocab mqar_vocab(std::size_t vocab_size);

struct MqarSample {
  std::vector<int> tokens;
  std::vector<bool> target_mask;
  std::vector<int> targets;  // one per masked position, in position order
};

// Sample i depends only on (cfg, seed + i).
MqarSample mqar_sample(const MqarConfig& cfg, std::size_t index);
std::vector<MqarSample> mqar_generate(const MqarConfig& cfg);

// Per-position targets (0 where unmasked), aligned with tokens.
std::vector<int> dense_targets(const MqarSample& s);

// Exact-match rate of argmax(logits) at masked positions; ties break to the
// lowest id. logits[i] is seq_len x vocab for sample i.
double mqar_accuracy(const std::vector<Mat>& logits, const std::vector<MqarSample>& samples);

struct MqarDataset {
  MqarConfig config;
  std::vector<MqarSample> samples;
};

// "MQAR", u32 version 1, u32 vocab, u32 L, u32 N_KV, u32 count, u64 seed, then
// per sample L u32 tokens, ceil(L/8) mask bytes (LSB first) and one u32 per
// masked position.
std::string encode_dataset(const MqarDataset& ds);
MqarDataset decode_dataset(const std::string& bytes);
void save_dataset(const std::string& path, const MqarDataset& ds);
MqarDataset load_dataset(const std::string& path);

}  // namespace lattice
