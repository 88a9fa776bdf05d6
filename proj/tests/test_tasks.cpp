// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "lattice/io.hpp"
#include "lattice/tasks.hpp"
#include "test_util.hpp"

using namespace lattice;

namespace {

MqarConfig small(std::size_t samples = 200, std::uint64_t seed = 3) {
  MqarConfig c;
  c.num_samples = samples;
  c.seed = seed;
  return c;
}

Mat onehot_logits(const MqarSample& s, std::size_t vocab) {
  Mat out(s.tokens.size(), vocab);
  const auto dense = dense_targets(s);
  for (std::size_t t = 0; t < s.tokens.size(); ++t) out(t, dense[t]) = 1.0;
  return out;
}

}  // namespace

TEST_CASE("vocabulary segments are disjoint") {
  for (std::size_t v : {4, 5, 11, 64, 200}) {
    const MqarVocab voc = mqar_vocab(v);
    CHECK(voc.query == 0);
    CHECK(voc.key_begin == 1);
    CHECK(voc.key_end == voc.value_begin);
    CHECK(voc.value_end == voc.filler_begin);
    CHECK(voc.key_end - voc.key_begin == voc.value_end - voc.value_begin);
    CHECK(voc.key_end > voc.key_begin);
    CHECK(voc.filler_end == static_cast<int>(v));
    CHECK(voc.filler_end > voc.filler_begin);
  }
  CHECK_THROWS_AS(mqar_vocab(3), std::invalid_argument);
}

TEST_CASE("minimal instance") {
  MqarConfig c;
  c.vocab_size = 8;
  c.seq_len = 4;
  c.num_kv_pairs = 1;
  c.num_samples = 1;
  const MqarSample s = mqar_sample(c, 0);
  const MqarVocab voc = mqar_vocab(8);
  REQUIRE(s.tokens.size() == 4);
  CHECK(s.tokens[0] >= voc.key_begin);
  CHECK(s.tokens[0] < voc.key_end);
  CHECK(s.tokens[1] >= voc.value_begin);
  CHECK(s.tokens[1] < voc.value_end);
  CHECK(s.tokens[2] == s.tokens[0]);
  CHECK(s.tokens[3] == voc.query);
  CHECK(s.target_mask == std::vector<bool>{false, false, false, true});
  CHECK(s.targets == std::vector<int>{s.tokens[1]});
}

TEST_CASE("every sample is a table lookup") {
  const MqarConfig c = small(500);
  const MqarVocab voc = mqar_vocab(c.vocab_size);
  for (const MqarSample& s : mqar_generate(c)) {
    REQUIRE(s.tokens.size() == c.seq_len);
    std::map<int, int> table;
    for (std::size_t i = 0; i < c.num_kv_pairs; ++i) {
      const int k = s.tokens[2 * i], v = s.tokens[2 * i + 1];
      CHECK(k >= voc.key_begin);
      CHECK(k < voc.key_end);
      CHECK(v >= voc.value_begin);
      CHECK(v < voc.value_end);
      CHECK(table.emplace(k, v).second);
    }
    std::size_t j = 0;
    std::set<int> queried;
    for (std::size_t p = 2 * c.num_kv_pairs; p < c.seq_len; ++p) {
      const int tok = s.tokens[p];
      if (s.target_mask[p]) {
        CHECK(tok == voc.query);
        CHECK(table.count(s.tokens[p - 1]) == 1);
        CHECK(s.targets[j++] == table[s.tokens[p - 1]]);
        queried.insert(s.tokens[p - 1]);
      } else if (tok != voc.query && !(p + 1 < c.seq_len && s.target_mask[p + 1])) {
        CHECK(tok >= voc.filler_begin);
      }
    }
    CHECK(j == s.targets.size());
    CHECK(queried.size() == c.num_kv_pairs);
    for (std::size_t p = 0; p < 2 * c.num_kv_pairs; ++p) CHECK_FALSE(s.target_mask[p]);
  }
}

TEST_CASE("generation is deterministic") {
  const MqarConfig c = small(50);
  CHECK(encode_dataset({c, mqar_generate(c)}) == encode_dataset({c, mqar_generate(c)}));
  CHECK(mqar_sample(c, 17).tokens == mqar_generate(c)[17].tokens);
  MqarConfig other = c;
  other.seed = 4;
  CHECK(mqar_generate(other)[0].tokens != mqar_generate(c)[0].tokens);
}

TEST_CASE("keys are drawn uniformly") {
  const MqarConfig c = small(10000, 0);
  const MqarVocab voc = mqar_vocab(c.vocab_size);
  std::map<int, double> counts;
  for (const MqarSample& s : mqar_generate(c))
    for (std::size_t i = 0; i < c.num_kv_pairs; ++i) counts[s.tokens[2 * i]] += 1.0;
  const double n_keys = voc.key_end - voc.key_begin;
  const double p = static_cast<double>(c.num_kv_pairs) / n_keys;
  const double mean = p * static_cast<double>(c.num_samples);
  const double sigma = std::sqrt(mean * (1.0 - p));
  CHECK(counts.size() == static_cast<std::size_t>(n_keys));
  for (const auto& [key, n] : counts) {
    CAPTURE(key);
    CHECK(std::abs(n - mean) <= 3.0 * sigma);
  }
}

TEST_CASE("accuracy") {
  const MqarConfig c = small(400);
  const auto samples = mqar_generate(c);
  const MqarVocab voc = mqar_vocab(c.vocab_size);
  std::vector<Mat> logits;
  for (const auto& s : samples) logits.push_back(onehot_logits(s, c.vocab_size));
  CHECK(mqar_accuracy(logits, samples) == 1.0);

  // Scrambling logits away from the answer slots changes nothing.
  std::mt19937_64 rng(9);
  auto scrambled = logits;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t t = 0; t < c.seq_len; ++t)
      if (!samples[i].target_mask[t])
        for (std::size_t v = 0; v < c.vocab_size; ++v) scrambled[i](t, v) = testing::uniform(rng, -5, 5);
  CHECK(mqar_accuracy(scrambled, samples) == 1.0);

  // Flat logits over the value segment: ties go to the lowest value id.
  std::size_t total = 0, lowest = 0;
  std::vector<Mat> flat;
  for (const auto& s : samples) {
    Mat m(c.seq_len, c.vocab_size, -1.0);
    for (std::size_t t = 0; t < c.seq_len; ++t)
      for (int v = voc.value_begin; v < voc.value_end; ++v) m(t, v) = 0.0;
    flat.push_back(m);
    for (int target : s.targets) {
      ++total;
      lowest += target == voc.value_begin;
    }
  }
  const double n_values = voc.value_end - voc.value_begin;
  CHECK(mqar_accuracy(flat, samples) == doctest::Approx(double(lowest) / double(total)));
  const double p = 1.0 / n_values, sigma = std::sqrt(p * (1 - p) / double(total));
  CHECK(std::abs(mqar_accuracy(flat, samples) - p) <= 3.0 * sigma);

  // Random logits on the value segment behave the same way in expectation.
  std::vector<Mat> noisy = flat;
  for (Mat& m : noisy)
    for (std::size_t t = 0; t < c.seq_len; ++t)
      for (int v = voc.value_begin; v < voc.value_end; ++v) m(t, v) = testing::uniform(rng, 0, 1);
  CHECK(std::abs(mqar_accuracy(noisy, samples) - p) <= 3.0 * sigma);

  CHECK_THROWS(mqar_accuracy(std::vector<Mat>(3), samples));
}

TEST_CASE("dataset serialization") {
  const MqarConfig c = small(30);
  const MqarDataset ds{c, mqar_generate(c)};
  const std::string bytes = encode_dataset(ds);
  CHECK(bytes.substr(0, 4) == "MQAR");
  const MqarDataset back = decode_dataset(bytes);
  CHECK(back.config.seq_len == c.seq_len);
  CHECK(back.config.seed == c.seed);
  REQUIRE(back.samples.size() == 30);
  for (std::size_t i = 0; i < 30; ++i) {
    CHECK(back.samples[i].tokens == ds.samples[i].tokens);
    CHECK(back.samples[i].target_mask == ds.samples[i].target_mask);
    CHECK(back.samples[i].targets == ds.samples[i].targets);
  }
  CHECK(encode_dataset(back) == bytes);

  const auto path = (std::filesystem::temp_directory_path() / "lattice_tasks_test.bin").string();
  save_dataset(path, ds);
  CHECK(encode_dataset(load_dataset(path)) == bytes);
  std::filesystem::remove(path);

  CHECK_THROWS(decode_dataset("MQAX" + bytes.substr(4)));
  CHECK_THROWS(decode_dataset(bytes.substr(0, bytes.size() - 3)));
  CHECK_THROWS_AS(load_dataset("/nonexistent/lattice.bin"), IoError);
}

TEST_CASE("infeasible configurations") {
  MqarConfig c;
  c.seq_len = 15;  // four pairs need 16 positions
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = MqarConfig{};
  c.num_kv_pairs = 0;
  CHECK_THROWS_AS(mqar_generate(c), std::invalid_argument);
  c = MqarConfig{};
  c.vocab_size = 8;
  c.num_kv_pairs = 4;  // only a handful of distinct keys
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = MqarConfig{};
  c.num_samples = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
