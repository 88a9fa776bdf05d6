// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "lattice/model.hpp"
#include "test_util.hpp"

using namespace lattice;
using lattice::testing::random_mat;
using lattice::testing::rel_diff;

namespace {

ModelConfig tiny(const std::string& mixer, std::uint64_t seed = 1) {
  ModelConfig c;
  c.vocab_size = 13;
  c.d_model = 8;
  c.n_blocks = 2;
  c.n_heads = 2;
  c.m = 3;
  c.d_head = 4;
  c.conv_width = 3;
  c.mixer = mixer;
  c.seed = seed;
  return c;
}

// Makes every parameter nonzero so no code path hides behind an init value.
void perturb(Model& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (Parameter& p : model.params())
    for (double& x : p.value.storage()) x += testing::uniform(rng, -0.3, 0.3);
}

std::vector<int> random_ids(std::mt19937_64& rng, std::size_t T, std::size_t vocab) {
  std::vector<int> ids(T);
  for (int& id : ids) id = static_cast<int>(rng() % vocab);
  return ids;
}

// ---- scripted oracle: plain loops plus the library's token-level scans ----

Mat mm(const Mat& a, const Mat& b) {
  Mat out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j)
      for (std::size_t k = 0; k < a.cols(); ++k) out(i, j) += a(i, k) * b(k, j);
  return out;
}

Mat rms(const Mat& x, const Mat& g) {
  Mat out(x.rows(), x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    double ms = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) ms += x(t, c) * x(t, c);
    const double r = 1.0 / std::sqrt(ms / double(x.cols()) + 1e-6);
    for (std::size_t c = 0; c < x.cols(); ++c) out(t, c) = x(t, c) * g(0, c) * r;
  }
  return out;
}

Mat conv(const Mat& x, const Mat& w) {
  Mat out(x.rows(), x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t c = 0; c < x.cols(); ++c)
      for (std::size_t j = 0; j < w.rows() && j <= t; ++j) out(t, c) += w(j, c) * x(t - j, c);
  return out;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Mat gates(const Mat& xn, const Mat& w, const Mat& b) {
  Mat z = mm(xn, w);
  for (std::size_t t = 0; t < z.rows(); ++t)
    for (std::size_t c = 0; c < z.cols(); ++c) z(t, c) = sig(z(t, c) + b(0, c));
  return z;
}

Vec cols(const Mat& x, std::size_t t, std::size_t begin, std::size_t n) {
  return Vec(x.storage().begin() + t * x.cols() + begin, x.storage().begin() + t * x.cols() + begin + n);
}

void unit(Vec& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  for (double& x : v) x /= std::sqrt(s + 1e-6);
}

struct BlockTrace {
  Mat out;
  Mat gamma, mu;
};

BlockTrace oracle_block(const Model& model, std::size_t b, const Mat& x) {
  const ModelConfig& c = model.config();
  const MixerSpec spec = model.mixer();
  auto P = [&](const std::string& n) { return model.param("block" + std::to_string(b) + "." + n).value; };
  const Mat xn = rms(x, P("norm"));
  const Mat pre = mm(xn, P("w_qk"));
  Mat q = conv(pre, P("conv_q")), k = conv(pre, P("conv_k"));
  for (Mat* z : {&q, &k})
    for (double& e : z->storage()) e = e * sig(e);
  const Mat v = mm(xn, P("w_v"));
  BlockTrace tr;
  if (spec.uses_gamma()) tr.gamma = gates(xn, P("w_gamma"), P("b_gamma"));
  if (spec.uses_mu()) tr.mu = gates(xn, P("w_mu"), P("b_mu"));
  const std::size_t T = x.rows(), H = c.n_heads, m = c.m, dh = c.d_head;
  const bool unit_qk = spec.family == MixerFamily::Lattice || spec.baseline == BaselineKind::DeltaNet ||
                       spec.baseline == BaselineKind::GatedDeltaNet || spec.baseline == BaselineKind::RWKV7;
  Mat y(T, H * dh);
  for (std::size_t h = 0; h < H; ++h) {
    std::vector<TokenTriple> tokens;
    std::vector<Vec> mu_vecs;
    for (std::size_t t = 0; t < T; ++t) {
      TokenTriple tok{cols(k, t, h * m, m), cols(v, t, h * dh, dh), cols(q, t, h * m, m), 1.0, 1.0};
      if (unit_qk) {
        unit(tok.k);
        unit(tok.q);
      }
      if (spec.uses_gamma()) tok.gamma = tr.gamma(t, h);
      if (spec.uses_mu()) {
        if (spec.slot_decay()) mu_vecs.push_back(cols(tr.mu, t, h * m, m));
        else tok.mu = tr.mu(t, h);
      }
      tokens.push_back(std::move(tok));
    }
    const Mat& S0 = model.initial_states()[b * H + h];
    std::vector<Vec> outs;
    if (spec.family == MixerFamily::Lattice) {
      outs = lattice_scan(StateMatrix(S0), tokens, spec.mode, false).outputs;
    } else {
      outs = baseline_scan(spec.baseline, S0, tokens, mu_vecs).outputs;
    }
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t a = 0; a < dh; ++a) y(t, h * dh + a) = outs[t][a];
  }
  const Mat g = mm(xn, P("w_gate"));
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double z = g.storage()[i];
    y.storage()[i] *= 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0)));
  }
  tr.out = x;
  const Mat proj = mm(y, P("w_out"));
  for (std::size_t i = 0; i < proj.size(); ++i) tr.out.storage()[i] += proj.storage()[i];
  return tr;
}

Mat oracle_logits(const Model& model, const std::vector<int>& ids) {
  const ModelConfig& c = model.config();
  const Mat& E = model.param("embed").value;
  Mat x(ids.size(), c.d_model);
  for (std::size_t t = 0; t < ids.size(); ++t)
    for (std::size_t a = 0; a < c.d_model; ++a) x(t, a) = E(ids[t], a);
  for (std::size_t b = 0; b < c.n_blocks; ++b) x = oracle_block(model, b, x).out;
  Mat head;
  if (c.tie_embeddings) {
    head = Mat(c.d_model, c.vocab_size);
    for (std::size_t i = 0; i < c.vocab_size; ++i)
      for (std::size_t a = 0; a < c.d_model; ++a) head(a, i) = E(i, a);
  } else {
    head = model.param("head").value;
  }
  Mat out = mm(rms(x, model.param("final_norm").value), head);
  const Mat& bias = model.param("head_bias").value;
  for (std::size_t t = 0; t < out.rows(); ++t)
    for (std::size_t i = 0; i < out.cols(); ++i) out(t, i) += bias(0, i);
  return out;
}

const char* kMixers[] = {"lattice-dec", "lattice-sim", "lattice-enc", "la", "mamba2", "gla",
                         "deltanet", "gated-deltanet", "rwkv7", "ttt"};

}  // namespace

TEST_CASE("parameter count") {
  for (const char* mixer : kMixers) {
    for (bool shared : {true, false}) {
      for (bool tied : {true, false}) {
        ModelConfig c = tiny(mixer);
        c.shared_qk = shared;
        c.tie_embeddings = tied;
        const Model model(c);
        CAPTURE(mixer);
        CHECK(model.parameter_count() == expected_parameter_count(c));
      }
    }
  }
  // Default desk configuration, counted by hand: 64*64 embed, per block
  // 64 norm + 64*32 qk + 2*4*32 conv + 64*32 v + 65 gamma + 65 mu + 64*32 gate + 32*64 out,
  // then 64 final norm, 64*64 head and 64 head bias.
  const std::size_t block = 64 + 2048 + 256 + 2048 + 65 + 65 + 2048 + 2048;
  CHECK(Model(ModelConfig{}).parameter_count() == 4096 + 2 * block + 64 + 4096 + 64);
}

TEST_CASE("model equals the composition oracle") {
  std::mt19937_64 rng(51);
  for (const char* mixer : kMixers) {
    CAPTURE(mixer);
    Model model(tiny(mixer, 3));
    perturb(model, 4);
    const auto ids = random_ids(rng, 9, 13);
    CHECK(rel_diff(model.logits(ids), oracle_logits(model, ids)) <= 1e-12);
  }
  ModelConfig c = tiny("lattice-dec");
  c.tie_embeddings = true;
  Model tied(c);
  perturb(tied, 5);
  const auto ids = random_ids(rng, 7, 13);
  CHECK(rel_diff(tied.logits(ids), oracle_logits(tied, ids)) <= 1e-12);
}

TEST_CASE("block oracle and gate ranges") {
  std::mt19937_64 rng(52);
  Model model(tiny("lattice-sim", 6));
  perturb(model, 7);
  const Mat x = random_mat(rng, 6, 8);
  ad::Tape tape(false);
  std::vector<ad::Var> pv;
  for (const Parameter& p : model.params()) pv.push_back(tape.constant(p.value));
  const Mat got = model.block_forward(tape, 1, tape.constant(x), pv).value();
  const BlockTrace want = oracle_block(model, 1, x);
  CHECK(rel_diff(got, want.out) <= 1e-12);
  for (double g : want.gamma.storage()) CHECK((g > 0.0 && g < 1.0));
  for (double g : want.mu.storage()) CHECK((g > 0.0 && g < 1.0));

  // Zero input and zero biases leave the residual stream untouched.
  for (Parameter& p : model.params())
    if (p.name.find("b_") != std::string::npos) p.value = Mat(p.value.rows(), p.value.cols());
  std::vector<ad::Var> pv0;
  for (const Parameter& p : model.params()) pv0.push_back(tape.constant(p.value));
  const Mat zero = model.block_forward(tape, 0, tape.constant(Mat(5, 8)), pv0).value();
  CHECK(max_abs(zero) == 0.0);
}

TEST_CASE("no blocks is a passthrough") {
  ModelConfig c = tiny("la");
  c.n_blocks = 0;
  Model model(c);
  perturb(model, 8);
  const std::vector<int> ids{3, 1, 4, 1, 5};
  const Mat& E = model.param("embed").value;
  Mat x(5, 8);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t a = 0; a < 8; ++a) x(t, a) = E(ids[t], a);
  Mat want = mm(rms(x, model.param("final_norm").value), model.param("head").value);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i = 0; i < 13; ++i) want(t, i) += model.param("head_bias").value(0, i);
  CHECK(rel_diff(model.logits(ids), want) <= 1e-13);
}

TEST_CASE("logits are causal") {
  std::mt19937_64 rng(53);
  for (const char* mixer : {"lattice-dec", "lattice-enc", "gla", "ttt", "softmax"}) {
    for (ScanKind scan : {ScanKind::Sequential, ScanKind::ChunkFull, ScanKind::ChunkRank1}) {
      ModelConfig c = tiny(mixer);
      if (scan != ScanKind::Sequential) {
        if (std::string(mixer).rfind("lattice", 0) != 0) continue;
        c.scan = scan;
        c.chunk_size = 4;
      }
      Model model(c);
      perturb(model, 9);
      const auto ids = random_ids(rng, 11, 13);
      for (std::size_t t : {0, 5, 10}) {
        auto changed = ids;
        changed[t] = (ids[t] + 1) % 13;
        const Mat a = model.logits(ids), b = model.logits(changed);
        for (std::size_t r = 0; r < t; ++r)
          for (std::size_t i = 0; i < 13; ++i) CHECK(a(r, i) == b(r, i));
        double diff = 0.0;
        for (std::size_t i = 0; i < 13; ++i) diff += std::abs(a(t, i) - b(t, i));
        CHECK(diff > 0.0);
      }
    }
  }
}

TEST_CASE("prepending a token shifts the logits") {
  // With no blocks every position is independent, so prepending only shifts rows.
  ModelConfig c = tiny("la");
  c.n_blocks = 0;
  const Model model(c);
  const Mat a = model.logits({2, 7, 9});
  const Mat b = model.logits({5, 2, 7, 9});
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t i = 0; i < 13; ++i) CHECK(a(t, i) == b(t + 1, i));
}

TEST_CASE("chunk scans at C = 1 match the sequential model") {
  std::mt19937_64 rng(54);
  for (const char* mixer : {"lattice-dec", "lattice-sim", "lattice-enc"}) {
    ModelConfig c = tiny(mixer);
    Model seq(c);
    perturb(seq, 10);
    const auto ids = random_ids(rng, 10, 13);
    for (ScanKind scan : {ScanKind::ChunkFull, ScanKind::ChunkRank1}) {
      c.scan = scan;
      Model chunk(c);
      chunk.params() = seq.params();
      CHECK(rel_diff(chunk.logits(ids), seq.logits(ids)) <= 1e-10);
    }
  }
}

TEST_CASE("initial states") {
  const Model lat(tiny("lattice-dec", 2));
  CHECK(lat.initial_states().size() == 4);
  for (const Mat& S : lat.initial_states())
    for (double n : StateMatrix(S).slot_norms()) CHECK(std::abs(n - 1.0) <= 1e-12);
  CHECK(rel_diff(lat.initial_states()[0], Model(tiny("lattice-dec", 2)).initial_states()[0]) == 0.0);
  const Model la(tiny("la"));
  CHECK(max_abs(la.initial_states()[1]) == 0.0);
}

TEST_CASE("configuration errors") {
  ModelConfig c = tiny("la");
  c.scan = ScanKind::ChunkFull;
  CHECK_THROWS_AS(Model{c}, std::invalid_argument);
  c = tiny("lattice-dec");
  c.chunk_size = 0;
  CHECK_THROWS_AS(Model{c}, std::invalid_argument);
  c = tiny("bogus");
  CHECK_THROWS_AS(Model{c}, std::invalid_argument);
  c = tiny("la");
  c.qk_activation = "relu";
  CHECK_THROWS_AS(Model{c}, std::invalid_argument);
  const Model model(tiny("la"));
  CHECK_THROWS(model.logits({0, 13}));
  CHECK_THROWS(model.logits({-1}));
  CHECK_THROWS_AS(model.param("nope"), std::out_of_range);
  CHECK(parse_scan_kind(scan_kind_name(ScanKind::ChunkRank1)) == ScanKind::ChunkRank1);
  CHECK(parse_mixer("lattice-enc").mode == Mode::Enc);
  CHECK(parse_mixer("gated-deltanet").name() == "gated-deltanet");
}
