// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/tasks.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>

#include "lattice/io.hpp"

namespace lattice {

MqarVocab mqar_vocab(std::size_t vocab_size) {
  if (vocab_size < 4) throw std::invalid_argument("mqar: vocab_size must be >= 4");
  const int usable = static_cast<int>(vocab_size) - 1;
  const int filler = std::max(1, usable / 8);
  const int half = (usable - filler) / 2;
  MqarVocab v;
  v.key_begin = 1;
  v.key_end = v.value_begin = 1 + half;
  v.value_end = v.filler_begin = 1 + 2 * half;
  v.filler_end = static_cast<int>(vocab_size);
  return v;
}

void MqarConfig::validate() const {
  const MqarVocab v = mqar_vocab(vocab_size);
  if (num_kv_pairs == 0) throw std::invalid_argument("mqar: num_kv_pairs must be >= 1");
  if (4 * num_kv_pairs > seq_len) {
    throw std::invalid_argument("mqar: seq_len must hold 2 * num_kv_pairs definitions and as many queries");
  }
  if (num_kv_pairs > static_cast<std::size_t>(v.key_end - v.key_begin)) {
    throw std::invalid_argument("mqar: more pairs than distinct keys in the vocabulary");
  }
  if (num_samples == 0) throw std::invalid_argument("mqar: num_samples must be >= 1");
}

MqarSample mqar_sample(const MqarConfig& cfg, std::size_t index) {
  const MqarVocab voc = mqar_vocab(cfg.vocab_size);
  const std::uint64_t s = cfg.seed + index;
  std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32), 0x4d514152u};
  std::mt19937_64 rng(seq);
  const std::size_t N = cfg.num_kv_pairs, L = cfg.seq_len;

  std::vector<int> keys(static_cast<std::size_t>(voc.key_end - voc.key_begin));
  std::iota(keys.begin(), keys.end(), voc.key_begin);
  std::shuffle(keys.begin(), keys.end(), rng);
  keys.resize(N);
  std::uniform_int_distribution<int> value_dist(voc.value_begin, voc.value_end - 1);
  std::uniform_int_distribution<int> filler_dist(voc.filler_begin, voc.filler_end - 1);
  std::vector<int> values(N);
  for (int& v : values) v = value_dist(rng);

  MqarSample out;
  out.tokens.reserve(L);
  out.target_mask.assign(L, false);
  for (std::size_t i = 0; i < N; ++i) {
    out.tokens.push_back(keys[i]);
    out.tokens.push_back(values[i]);
  }
  // Remaining slots: N query items and F fillers in random order.
  std::vector<int> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t F = L - 4 * N;
  std::vector<int> items(N + F, -1);  // -1 marks a filler
  std::copy(order.begin(), order.end(), items.begin());
  std::shuffle(items.begin(), items.end(), rng);
  for (int it : items) {
    if (it < 0) {
      out.tokens.push_back(filler_dist(rng));
      continue;
    }
    out.tokens.push_back(keys[it]);
    out.tokens.push_back(voc.query);
    out.target_mask[out.tokens.size() - 1] = true;
    out.targets.push_back(values[it]);
  }
  return out;
}

std::vector<MqarSample> mqar_generate(const MqarConfig& cfg) {
  cfg.validate();
  std::vector<MqarSample> out;
  out.reserve(cfg.num_samples);
  for (std::size_t i = 0; i < cfg.num_samples; ++i) out.push_back(mqar_sample(cfg, i));
  return out;
}

std::vector<int> dense_targets(const MqarSample& s) {
  std::vector<int> out(s.tokens.size(), 0);
  std::size_t j = 0;
  for (std::size_t p = 0; p < s.tokens.size(); ++p)
    if (s.target_mask[p]) out[p] = s.targets.at(j++);
  return out;
}

double mqar_accuracy(const std::vector<Mat>& logits, const std::vector<MqarSample>& samples) {
  if (logits.size() != samples.size()) throw ShapeError("mqar_accuracy: logits/sample count mismatch");
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const MqarSample& s = samples[i];
    if (logits[i].rows() != s.tokens.size()) throw ShapeError("mqar_accuracy: logits rows vs length");
    std::size_t j = 0;
    for (std::size_t p = 0; p < s.tokens.size(); ++p) {
      if (!s.target_mask[p]) continue;
      const auto row = logits[i].row(p);
      const auto best = std::max_element(row.begin(), row.end()) - row.begin();
      hit += best == s.targets[j++];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

std::string encode_dataset(const MqarDataset& ds) {
  const MqarConfig& c = ds.config;
  std::string out = "MQAR";
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(c.vocab_size));
  put_u32(out, static_cast<std::uint32_t>(c.seq_len));
  put_u32(out, static_cast<std::uint32_t>(c.num_kv_pairs));
  put_u32(out, static_cast<std::uint32_t>(ds.samples.size()));
  put_u64(out, c.seed);
  for (const MqarSample& s : ds.samples) {
    if (s.tokens.size() != c.seq_len) throw ShapeError("encode_dataset: sample length vs seq_len");
    for (int t : s.tokens) put_u32(out, static_cast<std::uint32_t>(t));
    for (std::size_t b = 0; b < (c.seq_len + 7) / 8; ++b) {
      unsigned char byte = 0;
      for (std::size_t k = 0; k < 8 && 8 * b + k < c.seq_len; ++k)
        if (s.target_mask[8 * b + k]) byte |= static_cast<unsigned char>(1u << k);
      out.push_back(static_cast<char>(byte));
    }
    for (int t : s.targets) put_u32(out, static_cast<std::uint32_t>(t));
  }
  return out;
}

MqarDataset decode_dataset(const std::string& bytes) {
  ByteReader r(bytes, "mqar dataset");
  if (r.raw(4) != "MQAR") throw IoError("mqar dataset: bad magic");
  if (r.u32() != 1) throw IoError("mqar dataset: unsupported version");
  MqarDataset ds;
  ds.config.vocab_size = r.u32();
  ds.config.seq_len = r.u32();
  ds.config.num_kv_pairs = r.u32();
  ds.config.num_samples = r.u32();
  ds.config.seed = r.u64();
  const std::size_t L = ds.config.seq_len;
  ds.samples.reserve(ds.config.num_samples);
  for (std::size_t i = 0; i < ds.config.num_samples; ++i) {
    MqarSample s;
    s.tokens.resize(L);
    for (int& t : s.tokens) {
      t = static_cast<int>(r.u32());
      if (t < 0 || static_cast<std::size_t>(t) >= ds.config.vocab_size) {
        throw IoError("mqar dataset: token outside vocabulary");
      }
    }
    s.target_mask.assign(L, false);
    std::size_t count = 0;
    for (std::size_t b = 0; b < (L + 7) / 8; ++b) {
      const std::uint8_t byte = r.u8();
      for (std::size_t k = 0; k < 8 && 8 * b + k < L; ++k)
        if (byte & (1u << k)) {
          s.target_mask[8 * b + k] = true;
          ++count;
        }
    }
    s.targets.resize(count);
    for (int& t : s.targets) t = static_cast<int>(r.u32());
    ds.samples.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw IoError("mqar dataset: trailing bytes");
  return ds;
}

void save_dataset(const std::string& path, const MqarDataset& ds) {
  write_file_atomic(path, encode_dataset(ds));
}

MqarDataset load_dataset(const std::string& path) { return decode_dataset(read_file(path)); }

}  // namespace lattice
