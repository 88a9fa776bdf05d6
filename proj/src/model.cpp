// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace lattice {

using ad::Tape;
using ad::Var;

std::string_view scan_kind_name(ScanKind kind) {
  switch (kind) {
    case ScanKind::Sequential: return "sequential";
    case ScanKind::ChunkFull: return "chunk-full";
    case ScanKind::ChunkRank1: return "chunk-rank1";
  }
  return "?";
}

ScanKind parse_scan_kind(std::string_view name) {
  if (name == "sequential") return ScanKind::Sequential;
  if (name == "chunk-full") return ScanKind::ChunkFull;
  if (name == "chunk-rank1") return ScanKind::ChunkRank1;
  throw std::invalid_argument("unknown scan kind '" + std::string(name) + "'");
}

bool MixerSpec::uses_gamma() const {
  if (family == MixerFamily::Lattice) return true;
  switch (baseline) {
    case BaselineKind::DeltaNet:
    case BaselineKind::GatedDeltaNet:
    case BaselineKind::RWKV7:
    case BaselineKind::TTT: return true;
    default: return false;
  }
}

bool MixerSpec::uses_mu() const {
  if (family == MixerFamily::Lattice) return true;
  switch (baseline) {
    case BaselineKind::Mamba2:
    case BaselineKind::GLA:
    case BaselineKind::GatedDeltaNet:
    case BaselineKind::RWKV7: return true;
    default: return false;
  }
}

bool MixerSpec::slot_decay() const {
  return family == MixerFamily::Baseline && uses_slot_decay(baseline);
}

bool MixerSpec::unit_init_state() const {
  return family == MixerFamily::Lattice || baseline == BaselineKind::TTT;
}

std::string MixerSpec::name() const {
  if (family == MixerFamily::Lattice) return "lattice-" + std::string(mode_name(mode));
  return std::string(baseline_name(baseline));
}

MixerSpec parse_mixer(std::string_view name) {
  MixerSpec spec;
  if (name.starts_with("lattice-")) {
    spec.family = MixerFamily::Lattice;
    spec.mode = parse_mode(name.substr(8));
    return spec;
  }
  spec.family = MixerFamily::Baseline;
  spec.baseline = parse_baseline(name);
  return spec;
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
  };
  need(vocab_size >= 2, "vocab_size must be >= 2");
  need(d_model >= 1 && n_heads >= 1 && m >= 1 && d_head >= 1, "model dimensions must be >= 1");
  need(conv_width >= 1, "conv_width must be >= 1");
  need(chunk_size >= 1, "chunk_size must be >= 1");
  need(qk_activation == "silu" || qk_activation == "identity",
       "qk_activation must be 'silu' or 'identity'");
  const MixerSpec spec = parse_mixer(mixer);
  need(scan == ScanKind::Sequential || spec.family == MixerFamily::Lattice,
       "chunk scans are only available for lattice mixers");
}

namespace {

// Unit-norm q/k for the mixers whose update subtracts a read-out. Raw keys
// make a single write overwrite a unit-norm lattice slot.
bool unit_keys(const MixerSpec& s) {
  if (s.family == MixerFamily::Lattice) return true;
  return s.family == MixerFamily::Baseline &&
         (s.baseline == BaselineKind::DeltaNet || s.baseline == BaselineKind::GatedDeltaNet ||
          s.baseline == BaselineKind::RWKV7);
}

std::size_t mu_width(const ModelConfig& cfg, const MixerSpec& s) {
  return s.slot_decay() ? cfg.n_heads * cfg.m : cfg.n_heads;
}

// Initial decay bias: sigmoid(3) ~ 0.95 keeps most of the state early in training.
constexpr double kMuBiasInit = 3.0;

Mat gaussian(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double sigma) {
  std::normal_distribution<double> normal(0.0, sigma);
  Mat out(rows, cols);
  for (double& x : out.storage()) x = normal(rng);
  return out;
}

Var l2_normalize_rows(Var x) {
  return ad::mul_colvec(x, ad::rsqrt(ad::add_const(ad::row_sum(ad::square(x)), 1e-6)));
}

}  // namespace

std::size_t expected_parameter_count(const ModelConfig& cfg) {
  const MixerSpec spec = parse_mixer(cfg.mixer);
  const std::size_t D = cfg.d_model, Hm = cfg.n_heads * cfg.m, Hd = cfg.n_heads * cfg.d_head;
  std::size_t block = D;                                   // norm gain
  block += (cfg.shared_qk ? 1 : 2) * D * Hm;               // q/k projection(s)
  block += 2 * cfg.conv_width * Hm;                        // two conv channels
  block += D * Hd;                                         // v
  if (spec.uses_gamma()) block += D * cfg.n_heads + cfg.n_heads;
  if (spec.uses_mu()) block += (D + 1) * mu_width(cfg, spec);
  block += D * Hd;                                         // post-gate
  block += Hd * D;                                         // output
  std::size_t total = cfg.vocab_size * D + cfg.n_blocks * block + D + cfg.vocab_size;
  if (!cfg.tie_embeddings) total += D * cfg.vocab_size;
  return total;
}

void Model::add_param(std::string name, Mat value, bool decay) {
  index_.emplace(name, params_.size());
  params_.push_back(Parameter{std::move(name), std::move(value), decay});
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  mixer_ = parse_mixer(cfg_.mixer);
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t D = cfg_.d_model, H = cfg_.n_heads, Hm = H * cfg_.m, Hd = H * cfg_.d_head;
  const double proj = 1.0 / std::sqrt(static_cast<double>(D));

  add_param("embed", gaussian(rng, cfg_.vocab_size, D, 0.02), true);
  for (std::size_t b = 0; b < cfg_.n_blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    add_param(p + "norm", Mat(1, D, 1.0), false);
    if (cfg_.shared_qk) {
      add_param(p + "w_qk", gaussian(rng, D, Hm, proj), true);
    } else {
      add_param(p + "w_q", gaussian(rng, D, Hm, proj), true);
      add_param(p + "w_k", gaussian(rng, D, Hm, proj), true);
    }
    const double conv = 1.0 / std::sqrt(static_cast<double>(cfg_.conv_width));
    add_param(p + "conv_q", gaussian(rng, cfg_.conv_width, Hm, conv), true);
    add_param(p + "conv_k", gaussian(rng, cfg_.conv_width, Hm, conv), true);
    add_param(p + "w_v", gaussian(rng, D, Hd, proj), true);
    if (mixer_.uses_gamma()) {
      add_param(p + "w_gamma", gaussian(rng, D, H, proj), true);
      add_param(p + "b_gamma", Mat(1, H), false);
    }
    if (mixer_.uses_mu()) {
      const std::size_t w = mu_width(cfg_, mixer_);
      add_param(p + "w_mu", gaussian(rng, D, w, proj), true);
      add_param(p + "b_mu", Mat(1, w, kMuBiasInit), false);
    }
    add_param(p + "w_gate", gaussian(rng, D, Hd, proj), true);
    add_param(p + "w_out", gaussian(rng, Hd, D, 1.0 / std::sqrt(static_cast<double>(Hd))), true);
  }
  add_param("final_norm", Mat(1, D, 1.0), false);
  if (!cfg_.tie_embeddings) add_param("head", gaussian(rng, D, cfg_.vocab_size, proj), true);
  add_param("head_bias", Mat(1, cfg_.vocab_size), false);

  for (std::size_t b = 0; b < cfg_.n_blocks; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      if (mixer_.unit_init_state()) {
        const std::uint64_t s = cfg_.seed * 1000003ULL + 7919ULL * (b * H + h) + 1;
        s0_.push_back(init_state(cfg_.m, cfg_.d_head, s).mat());
      } else {
        s0_.push_back(Mat(cfg_.m, cfg_.d_head));
      }
    }
}

std::size_t Model::index_of(std::string_view name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return it->second;
}

Parameter& Model::param(std::string_view name) { return params_[index_of(name)]; }
const Parameter& Model::param(std::string_view name) const { return params_[index_of(name)]; }

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<Mat> Model::zero_grads() const {
  std::vector<Mat> g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.emplace_back(p.value.rows(), p.value.cols());
  return g;
}

Var Model::run_head(Tape& tape, Var q, Var k, Var v, Var gamma, Var mu, const Mat& S0) const {
  if (mixer_.family == MixerFamily::Lattice) {
    switch (cfg_.scan) {
      case ScanKind::Sequential: return ad::lattice_sequential(k, v, q, gamma, mu, S0, mixer_.mode);
      case ScanKind::ChunkFull:
        return lattice_chunk_full(tape, k, v, q, gamma, mu, S0, mixer_.mode, cfg_.chunk_size);
      case ScanKind::ChunkRank1:
        return lattice_chunk_rank1(tape, k, v, q, gamma, mu, S0, mixer_.mode, cfg_.chunk_size);
    }
  }
  const std::size_t T = q.rows();
  auto broadcast = [&](Var col) { return ad::matmul(col, tape.constant(Mat(1, cfg_.m, 1.0))); };
  using ad::DeltaFamilyOptions;
  switch (mixer_.baseline) {
    case BaselineKind::LA: return ad::delta_family(k, v, q, std::nullopt, std::nullopt, S0, {});
    case BaselineKind::Mamba2:
      return ad::delta_family(k, v, q, broadcast(mu), std::nullopt, S0, {});
    case BaselineKind::GLA: return ad::delta_family(k, v, q, mu, std::nullopt, S0, {});
    case BaselineKind::DeltaNet:
      return ad::delta_family(k, v, q, std::nullopt, gamma, S0, DeltaFamilyOptions{true, false});
    case BaselineKind::GatedDeltaNet:
      return ad::delta_family(k, v, q, broadcast(mu), gamma, S0, DeltaFamilyOptions{true, true});
    case BaselineKind::RWKV7:
      return ad::delta_family(k, v, q, mu, gamma, S0, DeltaFamilyOptions{true, false});
    case BaselineKind::TTT: return ttt_sequential(tape, k, v, q, gamma, S0);
    case BaselineKind::SoftmaxRef:
      return ad::causal_softmax_attention(ad::scale(q, 1.0 / std::sqrt(double(cfg_.m))), k, v);
  }
  (void)T;
  throw std::logic_error("unhandled mixer");
}

Var Model::block_forward(Tape& tape, std::size_t b, Var x, const std::vector<Var>& pv) const {
  const std::string p = "block" + std::to_string(b) + ".";
  auto P = [&](const std::string& n) { return pv[index_of(p + n)]; };
  const std::size_t H = cfg_.n_heads, m = cfg_.m, dh = cfg_.d_head;

  const Var xn = ad::rmsnorm(x, P("norm"));
  Var q_pre, k_pre;
  if (cfg_.shared_qk) {
    q_pre = k_pre = ad::matmul(xn, P("w_qk"));
  } else {
    q_pre = ad::matmul(xn, P("w_q"));
    k_pre = ad::matmul(xn, P("w_k"));
  }
  Var q = ad::causal_conv(q_pre, P("conv_q"));
  Var k = ad::causal_conv(k_pre, P("conv_k"));
  if (cfg_.qk_activation == "silu") {
    q = ad::silu(q);
    k = ad::silu(k);
  }
  const Var v = ad::matmul(xn, P("w_v"));
  Var gamma, mu;
  if (mixer_.uses_gamma()) gamma = ad::sigmoid(ad::add_rowvec(ad::matmul(xn, P("w_gamma")), P("b_gamma")));
  if (mixer_.uses_mu()) mu = ad::sigmoid(ad::add_rowvec(ad::matmul(xn, P("w_mu")), P("b_mu")));

  std::vector<Var> heads;
  heads.reserve(H);
  for (std::size_t h = 0; h < H; ++h) {
    Var qh = H == 1 ? q : ad::slice_cols(q, h * m, m);
    Var kh = H == 1 ? k : ad::slice_cols(k, h * m, m);
    const Var vh = H == 1 ? v : ad::slice_cols(v, h * dh, dh);
    if (unit_keys(mixer_)) {
      qh = l2_normalize_rows(qh);
      kh = l2_normalize_rows(kh);
    }
    Var gh, mh;
    if (mixer_.uses_gamma()) gh = H == 1 ? gamma : ad::slice_cols(gamma, h, 1);
    if (mixer_.uses_mu()) {
      const std::size_t w = mixer_.slot_decay() ? m : 1;
      mh = H == 1 ? mu : ad::slice_cols(mu, h * w, w);
    }
    heads.push_back(run_head(tape, qh, kh, vh, gh, mh, s0_[b * H + h]));
  }
  const Var y = H == 1 ? heads[0] : ad::concat_cols(heads);
  const Var gated = ad::mul(y, ad::gelu(ad::matmul(xn, P("w_gate"))));
  return ad::add(x, ad::matmul(gated, P("w_out")));
}

Var Model::forward(Tape& tape, const std::vector<int>& ids, std::vector<Mat>* grads) const {
  if (grads && grads->size() != params_.size()) {
    throw std::invalid_argument("forward: gradient buffer count does not match parameters");
  }
  std::vector<Var> pv;
  pv.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i)
    pv.push_back(tape.param(params_[i].value, grads ? &(*grads)[i] : nullptr));

  Var x = ad::embedding(pv[index_of("embed")], ids);
  for (std::size_t b = 0; b < cfg_.n_blocks; ++b) x = block_forward(tape, b, x, pv);
  const Var xn = ad::rmsnorm(x, pv[index_of("final_norm")]);
  const Var head = cfg_.tie_embeddings ? ad::transpose(pv[index_of("embed")]) : pv[index_of("head")];
  return ad::add_rowvec(ad::matmul(xn, head), pv[index_of("head_bias")]);
}

Mat Model::logits(const std::vector<int>& ids) const {
  Tape tape(false);
  return forward(tape, ids, nullptr).value();
}

// ---------------------------------------------------------------------------

namespace {

struct ChunkVars {
  Var H;       // C x d driver rows
  Var Htilde;  // C x m
  Var Kraw;    // C x m
  Var beta;    // C x m
  Var Khat;    // C x m
};

ChunkVars chunk_start_vars(Tape& tape, Var S, Var K, Var V, Var gamma, Var mu, Mode mode) {
  const Var nn = ad::row_sum(ad::square(S));  // m x 1
  const Var n = ad::sqrt(nn);
  const Var phi = ad::mul_colvec(S, ad::reciprocal(n));
  ChunkVars cv;
  Var c;
  switch (mode) {
    case Mode::Dec:
      cv.H = ad::sub(ad::matmul(K, phi), V);
      c = K;
      break;
    case Mode::Sim:
      cv.H = ad::scale(V, -1.0);
      c = K;
      break;
    case Mode::Enc:
      cv.H = V;
      c = ad::sub(ad::matmul(V, ad::transpose(phi)), K);
      break;
  }
  const Var nn_row = ad::transpose(nn);
  const Var n_row = ad::transpose(n);
  cv.Htilde = ad::mul_rowvec(ad::matmul(cv.H, ad::transpose(S)), ad::reciprocal(nn_row));
  cv.Kraw = ad::mul_rowvec(c, ad::reciprocal(n_row));
  // |delta|^2 = gamma^2 Kraw^2 (|h|^2 - |s|^2 Htilde^2), clamped at zero
  const Var hh = ad::row_sum(ad::square(cv.H));
  const Var raw = ad::sub(ad::mul_colvec(ad::square(cv.Kraw), hh),
                          ad::mul_rowvec(ad::square(ad::mul(cv.Htilde, cv.Kraw)), nn_row));
  const Var Ds = ad::mul_colvec(ad::clamp_min0(raw), ad::square(gamma));
  const Var w = ad::add(ad::matmul(ad::square(mu), nn_row), Ds);
  cv.beta = ad::mul_rowvec(ad::rsqrt(w), n_row);
  cv.Khat = ad::mul_colvec(ad::mul(cv.beta, cv.Kraw), gamma);
  (void)tape;
  return cv;
}

void check_chunk_inputs(Var K, Var V, Var Q, Var gamma, Var mu, const Mat& S0, std::size_t C) {
  if (C == 0) throw std::invalid_argument("chunk size must be >= 1");
  const std::size_t T = K.rows();
  if (K.cols() != S0.rows() || Q.cols() != S0.rows() || V.cols() != S0.cols() || Q.rows() != T ||
      V.rows() != T || gamma.rows() != T || mu.rows() != T || gamma.cols() != 1 || mu.cols() != 1) {
    throw ShapeError("chunk scan: input shapes do not match state " + S0.shape_str());
  }
}

}  // namespace

// A trailing partial chunk is processed at its own length, which equals
// padding with no-op tokens (their rows contribute nothing and are dropped).
Var lattice_chunk_full(Tape& tape, Var K, Var V, Var Q, Var gamma, Var mu, const Mat& S0, Mode mode,
                       std::size_t C) {
  check_chunk_inputs(K, V, Q, gamma, mu, S0, C);
  const std::size_t T = K.rows();
  Var S = tape.constant(S0);
  std::vector<Var> outputs;
  for (std::size_t b = 0; b < T; b += C) {
    const std::size_t len = std::min(C, T - b);
    const Var Kc = ad::slice_rows(K, b, len), Vc = ad::slice_rows(V, b, len),
              Qc = ad::slice_rows(Q, b, len), gc = ad::slice_rows(gamma, b, len),
              mc = ad::slice_rows(mu, b, len);
    const ChunkVars cv = chunk_start_vars(tape, S, Kc, Vc, gc, mc, mode);
    const Var a = ad::cumprod_rows(ad::mul_colvec(cv.beta, mc));
    const Var inv_a = ad::reciprocal(a);
    const Var F = ad::mul(a, ad::cumsum_rows(ad::mul(ad::mul(cv.Htilde, cv.Khat), inv_a)));
    const Var Kdiv = ad::mul(cv.Khat, inv_a);
    const Var P = ad::causal_mask(ad::matmul(ad::mul(Qc, a), ad::transpose(Kdiv)));
    outputs.push_back(
        ad::sub(ad::matmul(ad::mul(Qc, ad::add(a, F)), S), ad::matmul(P, cv.H)));
    const Var aC = ad::slice_rows(a, len - 1, 1);
    const Var f = ad::slice_rows(F, len - 1, 1);
    const Var KO = ad::mul_rowvec(Kdiv, aC);
    S = ad::sub(ad::mul_colvec(S, ad::transpose(ad::add(aC, f))),
                ad::matmul(ad::transpose(KO), cv.H));
  }
  return outputs.size() == 1 ? outputs[0] : ad::concat_rows(outputs);
}

Var lattice_chunk_rank1(Tape& tape, Var K, Var V, Var Q, Var gamma, Var mu, const Mat& S0, Mode mode,
                        std::size_t C) {
  check_chunk_inputs(K, V, Q, gamma, mu, S0, C);
  const std::size_t T = K.rows(), m = S0.rows();
  Var S = tape.constant(S0);
  std::vector<Var> outputs;
  for (std::size_t b = 0; b < T; b += C) {
    const std::size_t len = std::min(C, T - b);
    const Var Kc = ad::slice_rows(K, b, len), Vc = ad::slice_rows(V, b, len),
              Qc = ad::slice_rows(Q, b, len), gc = ad::slice_rows(gamma, b, len),
              mc = ad::slice_rows(mu, b, len);
    const ChunkVars cv = chunk_start_vars(tape, S, Kc, Vc, gc, mc, mode);
    // G = beta (mu + gamma Htilde Kraw), Ktilde = -Khat
    const Var G = ad::mul(cv.beta, ad::add_colvec(ad::mul_colvec(ad::mul(cv.Htilde, cv.Kraw), gc), mc));
    const Var out = ad::gla_chunk(Qc, ad::scale(cv.Khat, -1.0), cv.H, G, S);
    S = ad::slice_rows(out, 0, m);
    outputs.push_back(ad::slice_rows(out, m, len));
  }
  return outputs.size() == 1 ? outputs[0] : ad::concat_rows(outputs);
}

Var ttt_sequential(Tape& tape, Var K, Var V, Var Q, Var gamma, const Mat& S0) {
  const std::size_t T = K.rows();
  if (K.cols() != S0.rows() || Q.cols() != S0.rows() || V.cols() != S0.cols() || Q.rows() != T ||
      V.rows() != T || gamma.rows() != T || gamma.cols() != 1) {
    throw ShapeError("ttt scan: input shapes do not match state " + S0.shape_str());
  }
  Var S = tape.constant(S0);
  std::vector<Var> outputs;
  outputs.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    const Var k = ad::slice_rows(K, t, 1), v = ad::slice_rows(V, t, 1), q = ad::slice_rows(Q, t, 1);
    const Var g = ad::slice_rows(gamma, t, 1);
    const Var z = ad::matmul(k, S);
    const Var n = ad::sqrt(ad::sum_all(ad::square(z)));
    const Var inv_r = ad::reciprocal(ad::add_const(n, kTttEps));
    const Var e = ad::sub(ad::mul_scalar(z, inv_r), v);
    // d/dz 1/2|z/(|z|+eps) - v|^2 = e/r - z (z.e) / (|z| r^2)
    const Var coef = ad::mul(ad::sum_all(ad::mul(z, e)),
                             ad::mul(ad::reciprocal(n), ad::square(inv_r)));
    const Var dz = ad::sub(ad::mul_scalar(e, inv_r), ad::mul_scalar(z, coef));
    S = ad::sub(S, ad::mul_scalar(ad::matmul(ad::transpose(k), dz), g));
    outputs.push_back(ad::matmul(q, S));
  }
  return ad::concat_rows(outputs);
}

}  // namespace lattice
