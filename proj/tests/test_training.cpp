// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lattice/autodiff.hpp"
#include "lattice/training.hpp"
#include "test_util.hpp"

using namespace lattice;

namespace {

ModelConfig tiny(const std::string& mixer) {
  ModelConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.n_blocks = 2;
  c.m = 4;
  c.d_head = 8;
  c.conv_width = 2;
  c.mixer = mixer;
  c.seed = 5;
  return c;
}

std::vector<Sequence> random_batch(std::uint64_t seed, std::size_t n, std::size_t T, std::size_t vocab) {
  std::mt19937_64 rng(seed);
  std::vector<Sequence> out;
  for (std::size_t s = 0; s < n; ++s) {
    Sequence q;
    for (std::size_t t = 0; t < T; ++t) {
      q.tokens.push_back(static_cast<int>(rng() % vocab));
      q.targets.push_back(static_cast<int>(rng() % vocab));
      q.mask.push_back(t % 3 != 0);
    }
    out.push_back(q);
  }
  return out;
}

}  // namespace

TEST_CASE("head bias gradient of a constant-logit model") {
  ModelConfig c = tiny("la");
  c.n_blocks = 0;
  Model model(c);
  model.param("head").value = Mat(8, 11);
  Mat& bias = model.param("head_bias").value;
  for (std::size_t i = 0; i < 11; ++i) bias(0, i) = 0.1 * static_cast<double>(i) - 0.4;

  const auto batch = random_batch(3, 3, 5, 11);
  const LossAndGrad lg = loss_and_grad(model, batch);

  // Every position has the same softmax p, so the gradient is p - mean onehot.
  Vec p(11);
  double z = 0.0;
  for (std::size_t i = 0; i < 11; ++i) z += (p[i] = std::exp(bias(0, i)));
  for (double& x : p) x /= z;
  Vec want = p;
  std::size_t count = 0;
  double loss = 0.0;
  for (const Sequence& s : batch)
    for (std::size_t t = 0; t < s.tokens.size(); ++t)
      if (s.mask[t]) ++count;
  for (const Sequence& s : batch)
    for (std::size_t t = 0; t < s.tokens.size(); ++t)
      if (s.mask[t]) {
        want[s.targets[t]] -= 1.0 / static_cast<double>(count);
        loss -= std::log(p[s.targets[t]]) / static_cast<double>(count);
      }
  CHECK(lg.count == count);
  CHECK(lg.loss == doctest::Approx(loss).epsilon(1e-13));
  CHECK(batch_loss(model, batch) == doctest::Approx(loss).epsilon(1e-13));
  const Mat& g = lg.grads[&model.param("head_bias") - model.params().data()];
  for (std::size_t i = 0; i < 11; ++i) CHECK(std::abs(g(0, i) - want[i]) <= 1e-14);
}

TEST_CASE("duplicating the batch leaves the mean gradient unchanged") {
  const Model model(tiny("lattice-dec"));
  const auto batch = random_batch(4, 2, 6, 11);
  auto doubled = batch;
  doubled.insert(doubled.end(), batch.begin(), batch.end());
  const LossAndGrad a = loss_and_grad(model, batch), b = loss_and_grad(model, doubled);
  CHECK(b.loss == doctest::Approx(a.loss).epsilon(1e-14));
  for (std::size_t p = 0; p < a.grads.size(); ++p)
    CHECK(testing::rel_diff(a.grads[p], b.grads[p]) <= 1e-13);
}

TEST_CASE("loss input errors") {
  const Model model(tiny("la"));
  auto batch = random_batch(5, 1, 4, 11);
  batch[0].mask.assign(4, false);
  CHECK_THROWS_AS(loss_and_grad(model, batch), std::invalid_argument);
  Model bad(tiny("la"));
  bad.param("head_bias").value(0, 0) = NAN;
  CHECK_THROWS_AS(loss_and_grad(bad, random_batch(5, 1, 4, 11)), TrainingFault);
}

TEST_CASE("learning rate schedule") {
  OptimConfig c;
  c.base_lr = 1e-2;
  c.final_lr = 1e-4;
  c.warmup_steps = 100;
  c.total_steps = 1100;
  CHECK(learning_rate(c, 1) == doctest::Approx(1e-4));
  CHECK(learning_rate(c, 50) == doctest::Approx(5e-3));
  CHECK(learning_rate(c, 100) == doctest::Approx(1e-2));
  CHECK(learning_rate(c, 600) == doctest::Approx(0.5 * (1e-2 + 1e-4)));
  CHECK(learning_rate(c, 1100) == doctest::Approx(1e-4));
  CHECK(learning_rate(c, 5000) == doctest::Approx(1e-4));
  double prev = INFINITY;
  for (std::size_t s = 100; s <= 1100; s += 50) {
    CHECK(learning_rate(c, s) <= prev);
    prev = learning_rate(c, s);
  }
}

TEST_CASE("adamw") {
  Model model(tiny("la"));
  SUBCASE("zero gradients and no decay leave parameters unchanged") {
    OptimConfig c;
    c.weight_decay = 0.0;
    OptState opt = make_opt_state(model, c);
    const auto before = model.params();
    auto grads = model.zero_grads();
    adamw_step(opt, model.params(), grads);
    for (std::size_t p = 0; p < before.size(); ++p)
      CHECK(before[p].value.storage() == model.params()[p].value.storage());
  }
  SUBCASE("single scalar against the hand formula") {
    std::vector<Parameter> params{{"w", Mat{{0.7}}, true}};
    OptimConfig c;
    c.base_lr = 0.1;
    c.warmup_steps = 0;
    c.total_steps = 1;
    c.final_lr = 0.1;
    c.weight_decay = 0.1;
    c.clip_norm = 0.0;
    OptState opt{c, {Mat(1, 1)}, {Mat(1, 1)}, 0};
    double w = 0.7, m = 0.0, v = 0.0;
    for (int step = 1; step <= 3; ++step) {
      const double g = 0.3 * step - 0.5;
      std::vector<Mat> grads{Mat{{g}}};
      adamw_step(opt, params, grads);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1 - std::pow(0.9, step)), vh = v / (1 - std::pow(0.999, step));
      w = w - 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * w);
      CHECK(params[0].value(0, 0) == doctest::Approx(w).epsilon(1e-14));
    }
  }
  SUBCASE("warmup") {
    OptimConfig c;
    c.base_lr = 3e-3;
    c.warmup_steps = 100;
    OptState opt = make_opt_state(model, c);
    auto grads = model.zero_grads();
    CHECK(adamw_step(opt, model.params(), grads).lr == doctest::Approx(3e-5));
  }
  SUBCASE("non-finite update") {
    OptState opt = make_opt_state(model, OptimConfig{});
    auto grads = model.zero_grads();
    grads[0](0, 0) = INFINITY;
    CHECK_THROWS_AS(adamw_step(opt, model.params(), grads), TrainingFault);
  }
}

TEST_CASE("clipping") {
  std::mt19937_64 rng(6);
  for (double scale : {0.01, 1.0, 100.0}) {
    std::vector<Mat> g{testing::random_mat(rng, 3, 4, scale), testing::random_mat(rng, 1, 7, scale)};
    const double before = global_norm(g);
    CHECK(clip_gradients(g, 1.0) == before);
    CHECK(global_norm(g) <= 1.0 + 1e-12);
    if (before <= 1.0) CHECK(global_norm(g) == before);
  }
}

TEST_CASE("training is deterministic and lowers the loss") {
  const auto data = random_batch(7, 12, 6, 11);
  TrainConfig tc;
  tc.epochs = 6;
  tc.batch_size = 4;
  tc.optim.warmup_steps = 2;
  tc.optim.base_lr = 1e-2;
  CHECK(total_train_steps(data.size(), tc) == 18);
  Model a(tiny("lattice-dec")), b(tiny("lattice-dec"));
  const double start = batch_loss(a, data);
  std::size_t seen = 0;
  const auto rows = train(a, data, tc, [&](const MetricRow&) { ++seen; });
  train(b, data, tc);
  CHECK(rows.size() == 18);
  CHECK(seen == 18);
  CHECK(rows.back().step == 18);
  for (std::size_t p = 0; p < a.params().size(); ++p)
    CHECK(a.params()[p].value.storage() == b.params()[p].value.storage());
  CHECK(batch_loss(a, data) < start);
  tc.batch_size = 0;
  CHECK_THROWS_AS(train(a, data, tc), std::invalid_argument);
}

TEST_CASE("gradient checks") {
  const auto batch = random_batch(8, 2, 6, 11);
  SUBCASE("linear attention at 1e-6") {
    Model model(tiny("la"));
    const GradCheckReport r = grad_check(model, batch, 1e-6);
    CHECK_MESSAGE(r.passed, r.summary());
  }
  SUBCASE("lattice-dec at 1e-5") {
    Model model(tiny("lattice-dec"));
    const GradCheckReport r = grad_check(model, batch, 1e-5);
    CHECK_MESSAGE(r.passed, r.summary());
    CHECK(r.entries.size() == model.params().size());
    for (const auto& e : r.entries) CHECK(e.max_rel_error >= 0.0);
  }
  SUBCASE("chunk forms and baselines at 1e-5") {
    for (const char* mixer : {"mamba2", "gla", "gated-deltanet", "rwkv7", "softmax"}) {
      Model model(tiny(mixer));
      const GradCheckReport r = grad_check(model, batch, 1e-5);
      CHECK_MESSAGE(r.passed, mixer << ": " << r.summary());
    }
    for (ScanKind scan : {ScanKind::ChunkFull, ScanKind::ChunkRank1}) {
      ModelConfig c = tiny("lattice-enc");
      c.scan = scan;
      c.chunk_size = 4;
      Model model(c);
      const GradCheckReport r = grad_check(model, batch, 1e-5);
      CHECK_MESSAGE(r.passed, r.summary());
    }
  }
  SUBCASE("a corrupted backward fails") {
    Model model(tiny("lattice-dec"));
    ad::ScopedCorruptAdjoint corrupt;
    const GradCheckReport r = grad_check(model, batch, 1e-5);
    CHECK_FALSE(r.passed);
    CHECK(r.max_rel_error > 1e-3);
  }
  SUBCASE("size guard") {
    Model model(ModelConfig{});
    CHECK_THROWS(grad_check(model, batch, 1e-5));
  }
}

TEST_CASE("metrics writer") {
  const auto path = std::filesystem::temp_directory_path() / "lattice_metrics_test.csv";
  std::filesystem::remove(path);
  {
    MetricsWriter w(path.string());
    w.write({1, 0.5, 2.0, 3.0, 100.0});
  }
  MetricsWriter(path.string()).write({2, 0.25, 1.5, 0.5, 50.0});
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  CHECK(text.rfind("step,lr,loss,grad_norm,tokens_per_sec\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  CHECK(text.find("\n2,") != std::string::npos);
  std::filesystem::remove(path);
  CHECK_THROWS(MetricsWriter("/nonexistent-dir/x.csv").write({}));
}
