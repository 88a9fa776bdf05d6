// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace lattice {

namespace {

void check_inputs(const Mat& S, const TokenTriple& t) {
  if (t.k.size() != S.rows() || t.q.size() != S.rows() || t.v.size() != S.cols()) {
    throw ShapeError("baseline token shapes do not match state " + S.shape_str());
  }
  if (!(t.gamma >= 0.0 && t.gamma <= 1.0) || !(t.mu >= 0.0 && t.mu <= 1.0)) {
    throw std::invalid_argument("gamma and mu must lie in [0, 1]");
  }
}

std::span<const double> checked_mu_vec(BaselineKind kind, const Mat& S,
                                       std::span<const double> mu_vec) {
  if (!uses_slot_decay(kind)) return {};
  if (mu_vec.size() != S.rows()) {
    throw ShapeError(std::string(baseline_name(kind)) + ": mu_vec needs one entry per slot");
  }
  for (double x : mu_vec)
    if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("mu_vec entries must lie in [0, 1]");
  return mu_vec;
}

Vec read_out(const Mat& S, std::span<const double> q) {
  Vec y(S.cols(), 0.0);
  for (std::size_t i = 0; i < S.rows(); ++i) axpy(q[i], S.row(i), y);
  return y;
}

// d/dz of 1/2 |phi(z) - v|^2 with phi(z) = z / (|z| + eps).
Vec ttt_dz(std::span<const double> z, std::span<const double> v) {
  const double n = norm2(z);
  const double r = n + kTttEps;
  Vec e(z.size());
  for (std::size_t a = 0; a < z.size(); ++a) e[a] = z[a] / r - v[a];
  Vec g(z.size());
  for (std::size_t a = 0; a < z.size(); ++a) g[a] = e[a] / r;
  if (n > 0.0) axpy(-dot(z, e) / (n * r * r), z, g);
  return g;
}

}  // namespace

std::string_view baseline_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::LA: return "la";
    case BaselineKind::Mamba2: return "mamba2";
    case BaselineKind::GLA: return "gla";
    case BaselineKind::DeltaNet: return "deltanet";
    case BaselineKind::GatedDeltaNet: return "gated-deltanet";
    case BaselineKind::RWKV7: return "rwkv7";
    case BaselineKind::TTT: return "ttt";
    case BaselineKind::SoftmaxRef: return "softmax";
  }
  return "?";
}

BaselineKind parse_baseline(std::string_view name) {
  for (BaselineKind k : {BaselineKind::LA, BaselineKind::Mamba2, BaselineKind::GLA,
                         BaselineKind::DeltaNet, BaselineKind::GatedDeltaNet, BaselineKind::RWKV7,
                         BaselineKind::TTT, BaselineKind::SoftmaxRef}) {
    if (baseline_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown baseline '" + std::string(name) + "'");
}

bool uses_slot_decay(BaselineKind kind) {
  return kind == BaselineKind::GLA || kind == BaselineKind::RWKV7;
}

Vec slot_combination(const Mat& S, std::span<const double> k) {
  if (k.size() != S.rows()) throw ShapeError("slot_combination: key length vs slot count");
  Vec z(S.cols(), 0.0);
  for (std::size_t i = 0; i < S.rows(); ++i) axpy(k[i], S.row(i), z);
  return z;
}

Mat baseline_update(BaselineKind kind, const Mat& S, const TokenTriple& t,
                    std::span<const double> mu_vec) {
  check_inputs(S, t);
  mu_vec = checked_mu_vec(kind, S, mu_vec);
  const std::size_t m = S.rows();
  Mat out = S;
  switch (kind) {
    case BaselineKind::LA:
    case BaselineKind::Mamba2:
    case BaselineKind::GLA:
      for (std::size_t i = 0; i < m; ++i) {
        const double decay =
            kind == BaselineKind::LA ? 1.0 : kind == BaselineKind::Mamba2 ? t.mu : mu_vec[i];
        auto s = out.row(i);
        for (std::size_t a = 0; a < s.size(); ++a) s[a] = decay * s[a] + t.k[i] * t.v[a];
      }
      return out;
    case BaselineKind::DeltaNet:
    case BaselineKind::GatedDeltaNet:
    case BaselineKind::RWKV7: {
      if (kind == BaselineKind::GatedDeltaNet) out *= t.mu;
      Vec r = slot_combination(kind == BaselineKind::GatedDeltaNet ? out : S, t.k);
      for (std::size_t a = 0; a < r.size(); ++a) r[a] -= t.v[a];
      for (std::size_t i = 0; i < m; ++i) {
        auto s = out.row(i);
        if (kind == BaselineKind::RWKV7)
          for (double& x : s) x *= mu_vec[i];
        axpy(-t.gamma * t.k[i], r, s);
      }
      return out;
    }
    case BaselineKind::TTT:
      out -= ttt_gradient(S, t.k, t.v) * t.gamma;
      return out;
    case BaselineKind::SoftmaxRef:
      break;
  }
  throw std::invalid_argument("softmax attention has no recurrent state update");
}

BaselineScanResult baseline_scan(BaselineKind kind, const Mat& S0,
                                 std::span<const TokenTriple> tokens,
                                 std::span<const Vec> mu_vecs) {
  if (tokens.empty()) throw std::invalid_argument("baseline_scan: empty sequence");
  if (uses_slot_decay(kind) && mu_vecs.size() != tokens.size()) {
    throw ShapeError(std::string(baseline_name(kind)) + ": need one mu_vec per token");
  }
  BaselineScanResult out{S0, {}};
  out.outputs.reserve(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const std::span<const double> mv =
        uses_slot_decay(kind) ? std::span<const double>(mu_vecs[t]) : std::span<const double>();
    out.state = baseline_update(kind, out.state, tokens[t], mv);
    out.outputs.push_back(read_out(out.state, tokens[t].q));
  }
  return out;
}

BaselineScanResult la_scan(const Mat& S0, std::span<const TokenTriple> tokens) {
  return baseline_scan(BaselineKind::LA, S0, tokens);
}
BaselineScanResult mamba2_scan(const Mat& S0, std::span<const TokenTriple> tokens) {
  return baseline_scan(BaselineKind::Mamba2, S0, tokens);
}
BaselineScanResult gla_scan(const Mat& S0, std::span<const TokenTriple> tokens,
                            std::span<const Vec> mu_vecs) {
  return baseline_scan(BaselineKind::GLA, S0, tokens, mu_vecs);
}
BaselineScanResult deltanet_scan(const Mat& S0, std::span<const TokenTriple> tokens) {
  return baseline_scan(BaselineKind::DeltaNet, S0, tokens);
}
BaselineScanResult gated_deltanet_scan(const Mat& S0, std::span<const TokenTriple> tokens) {
  return baseline_scan(BaselineKind::GatedDeltaNet, S0, tokens);
}
BaselineScanResult rwkv7_scan(const Mat& S0, std::span<const TokenTriple> tokens,
                              std::span<const Vec> mu_vecs) {
  return baseline_scan(BaselineKind::RWKV7, S0, tokens, mu_vecs);
}
BaselineScanResult ttt_scan(const Mat& S0, std::span<const TokenTriple> tokens) {
  return baseline_scan(BaselineKind::TTT, S0, tokens);
}

double ttt_loss(const Mat& S, std::span<const double> k, std::span<const double> v) {
  if (v.size() != S.cols()) throw ShapeError("ttt_loss: value length vs state dim");
  const Vec z = slot_combination(S, k);
  const double r = norm2(z) + kTttEps;
  double acc = 0.0;
  for (std::size_t a = 0; a < z.size(); ++a) acc += std::pow(z[a] / r - v[a], 2);
  return 0.5 * acc;
}

Mat ttt_gradient(const Mat& S, std::span<const double> k, std::span<const double> v) {
  if (v.size() != S.cols()) throw ShapeError("ttt_gradient: value length vs state dim");
  const Vec g = ttt_dz(slot_combination(S, k), v);
  Mat out(S.rows(), S.cols());
  for (std::size_t i = 0; i < S.rows(); ++i) axpy(k[i], g, out.row(i));
  return out;
}

std::vector<Vec> softmax_attention_ref(std::span<const Vec> keys, std::span<const Vec> values,
                                       std::span<const Vec> queries) {
  const std::size_t T = keys.size();
  if (values.size() != T || queries.size() != T) {
    throw ShapeError("softmax_attention_ref: sequence lengths differ");
  }
  std::vector<Vec> out;
  out.reserve(T);
  Vec scores;
  for (std::size_t t = 0; t < T; ++t) {
    scores.assign(t + 1, 0.0);
    double peak = -INFINITY;
    for (std::size_t j = 0; j <= t; ++j) {
      scores[j] = dot(keys[j], queries[t]);
      peak = std::max(peak, scores[j]);
    }
    double z = 0.0;
    for (double& s : scores) z += (s = std::exp(s - peak));
    Vec y(values[0].size(), 0.0);
    for (std::size_t j = 0; j <= t; ++j) axpy(scores[j] / z, values[j], y);
    out.push_back(std::move(y));
  }
  return out;
}

OnlineObjective baseline_objective_setup(BaselineKind kind, const Mat& S, const TokenTriple& t,
                                         std::span<const double> mu_vec) {
  check_inputs(S, t);
  checked_mu_vec(kind, S, mu_vec);
  switch (kind) {
    case BaselineKind::LA:
    case BaselineKind::Mamba2:
    case BaselineKind::GLA: return {1.0, S};
    case BaselineKind::DeltaNet:
    case BaselineKind::RWKV7:
    case BaselineKind::TTT: return {t.gamma, S};
    case BaselineKind::GatedDeltaNet: return {t.gamma, S * t.mu};
    case BaselineKind::SoftmaxRef: break;
  }
  throw std::invalid_argument("softmax attention has no online objective");
}

double baseline_objective(BaselineKind kind, const Mat& S, const TokenTriple& t,
                          std::span<const double> mu_vec) {
  check_inputs(S, t);
  mu_vec = checked_mu_vec(kind, S, mu_vec);
  const Vec z = slot_combination(S, t.k);
  auto slot_sq = [&](std::size_t i) { return dot(S.row(i), S.row(i)); };
  switch (kind) {
    case BaselineKind::LA: return -dot(z, t.v);
    case BaselineKind::Mamba2: {
      double reg = 0.0;
      for (std::size_t i = 0; i < S.rows(); ++i) reg += slot_sq(i);
      return -dot(z, t.v) + 0.5 * (1.0 - t.mu) * reg;
    }
    case BaselineKind::GLA: {
      double reg = 0.0;
      for (std::size_t i = 0; i < S.rows(); ++i) reg += (1.0 - mu_vec[i]) * slot_sq(i);
      return -dot(z, t.v) + 0.5 * reg;
    }
    case BaselineKind::DeltaNet:
    case BaselineKind::GatedDeltaNet:
    case BaselineKind::RWKV7: {
      double err = 0.0;
      for (std::size_t a = 0; a < z.size(); ++a) err += std::pow(z[a] - t.v[a], 2);
      double loss = 0.5 * err;
      if (kind == BaselineKind::RWKV7) {
        double reg = 0.0;
        for (std::size_t i = 0; i < S.rows(); ++i) {
          const double lam_gamma = 1.0 - mu_vec[i];
          if (lam_gamma == 0.0) continue;
          if (t.gamma == 0.0) {
            throw std::domain_error("rwkv7 objective: decay without step size has no regularizer");
          }
          reg += lam_gamma / t.gamma * slot_sq(i);
        }
        loss += 0.5 * reg;
      }
      return loss;
    }
    case BaselineKind::TTT: return ttt_loss(S, t.k, t.v);
    case BaselineKind::SoftmaxRef: break;
  }
  throw std::invalid_argument("softmax attention has no online objective");
}

}  // namespace lattice
