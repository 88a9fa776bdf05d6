// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/recurrence.hpp"

#include <cassert>
#include <cmath>
#include <random>

namespace lattice {

std::string_view mode_name(Mode mode) {
  switch (mode) {
    case Mode::Dec: return "dec";
    case Mode::Sim: return "sim";
    case Mode::Enc: return "enc";
  }
  return "?";
}

Mode parse_mode(std::string_view name) {
  if (name == "dec" || name == "Dec") return Mode::Dec;
  if (name == "sim" || name == "Sim") return Mode::Sim;
  if (name == "enc" || name == "Enc") return Mode::Enc;
  throw std::invalid_argument("unknown mode '" + std::string(name) + "'");
}

StateMatrix::StateMatrix(std::size_t slots, std::size_t dim) : data_(slots, dim) {}

StateMatrix::StateMatrix(Mat slots) : data_(std::move(slots)) {}

Vec StateMatrix::slot_norms() const {
  Vec n(slots());
  for (std::size_t i = 0; i < slots(); ++i) n[i] = slot_norm(i);
  return n;
}

Vec StateMatrix::read(std::span<const double> q) const {
  if (q.size() != slots()) throw ShapeError("read: query length does not match slot count");
  Vec y(dim(), 0.0);
  for (std::size_t i = 0; i < slots(); ++i) axpy(q[i], slot(i), y);
  return y;
}

StateMatrix init_state(std::size_t slots, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  StateMatrix S(slots, dim);
  for (std::size_t i = 0; i < slots; ++i) {
    auto s = S.slot(i);
    double n = 0.0;
    while (n < 1e-3) {
      for (double& x : s) x = normal(rng);
      n = norm2(s);
    }
    for (double& x : s) x /= n;
  }
  return S;
}

void check_slots(const StateMatrix& S) {
  for (std::size_t i = 0; i < S.slots(); ++i) {
    const double n = S.slot_norm(i);
    if (!(n > kSlotEps)) {
      throw DegenerateStateError("slot " + std::to_string(i) + " has norm " + std::to_string(n) +
                                 " <= eps");
    }
  }
}

void check_token(const StateMatrix& S, const TokenTriple& t) {
  if (t.k.size() != S.slots() || t.q.size() != S.slots() || t.v.size() != S.dim()) {
    throw ShapeError("token shapes (k=" + std::to_string(t.k.size()) +
                     ", v=" + std::to_string(t.v.size()) + ", q=" + std::to_string(t.q.size()) +
                     ") do not match state " + std::to_string(S.slots()) + "x" +
                     std::to_string(S.dim()));
  }
  if (!(t.gamma >= 0.0 && t.gamma <= 1.0) || !(t.mu >= 0.0 && t.mu <= 1.0)) {
    throw std::invalid_argument("gamma and mu must lie in [0, 1]");
  }
}

Vec project_orthogonal(std::span<const double> h, std::span<const double> s) {
  if (h.size() != s.size()) throw ShapeError("project_orthogonal: length mismatch");
  const double ss = dot(s, s);
  if (!(std::sqrt(ss) > kSlotEps)) {
    throw DegenerateStateError("project_orthogonal: slot norm <= eps");
  }
  Vec out(h.begin(), h.end());
  axpy(-dot(s, h) / ss, s, out);
  return out;
}

namespace {

struct Readout {
  Vec norms;
  Mat phi;  // normalized slots (or raw slots when phi = identity)
};

Readout make_readout(const StateMatrix& S, bool normalize) {
  Readout r{S.slot_norms(), S.mat()};
  if (normalize) {
    for (std::size_t i = 0; i < S.slots(); ++i) {
      for (double& x : r.phi.row(i)) x /= r.norms[i];
    }
  }
  return r;
}

// Dec/Sim: Phi^T k - v in R^d.  Enc: Phi v - k in R^m.
Vec reconstruction_error(const Readout& r, const TokenTriple& t, Mode mode) {
  if (mode == Mode::Enc) {
    Vec e(r.phi.rows());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = dot(r.phi.row(i), t.v) - t.k[i];
    return e;
  }
  Vec e(r.phi.cols());
  for (std::size_t i = 0; i < r.phi.rows(); ++i) axpy(t.k[i], r.phi.row(i), e);
  for (std::size_t a = 0; a < e.size(); ++a) e[a] -= t.v[a];
  return e;
}

double loss_from_error(const Vec& e, const Readout& r, const TokenTriple& t, Mode mode) {
  if (mode == Mode::Sim) {
    Vec recon(r.phi.cols());
    for (std::size_t i = 0; i < r.phi.rows(); ++i) axpy(t.k[i], r.phi.row(i), recon);
    return -dot(recon, t.v);
  }
  return 0.5 * dot(e, e);
}

}  // namespace

double compression_loss(const StateMatrix& S, const TokenTriple& t, Mode mode) {
  check_token(S, t);
  check_slots(S);
  const Readout r = make_readout(S, true);
  const Vec e = reconstruction_error(r, t, mode);
  return loss_from_error(e, r, t, mode);
}

GradientResult osr_gradient(const StateMatrix& S, const TokenTriple& t, Mode mode,
                            const StepOptions& opts) {
  check_token(S, t);
  if (opts.normalize_read) check_slots(S);
  const std::size_t m = S.slots(), d = S.dim();
  const Readout r = make_readout(S, opts.normalize_read);

  GradientResult out{Mat(m, d), {}};
  StepTrace& tr = out.trace;
  tr.e = reconstruction_error(r, t, mode);
  tr.loss = loss_from_error(tr.e, r, t, mode);
  switch (mode) {
    case Mode::Dec: tr.h = tr.e; break;
    case Mode::Sim:
      tr.h = t.v;
      for (double& x : tr.h) x = -x;
      break;
    case Mode::Enc: tr.h = t.v; break;
  }
  const Vec& c = mode == Mode::Enc ? tr.e : t.k;

  tr.h_hat.assign(m, 0.0);
  tr.k_hat.assign(m, 0.0);
  tr.beta.assign(m, 1.0);
  for (std::size_t i = 0; i < m; ++i) {
    auto g = out.grad.row(i);
    const double n = r.norms[i];
    if (n > 0.0) tr.h_hat[i] = dot(S.slot(i), tr.h) / (n * n);
    if (opts.normalize_read) {
      const Vec p = project_orthogonal(tr.h, S.slot(i));
      axpy(c[i] / n, p, g);
    } else {
      axpy(c[i], tr.h, g);
    }
  }

  tr.delta = out.grad * (-t.gamma);
  for (std::size_t i = 0; i < m; ++i) {
    const double n = r.norms[i];
    if (opts.retract) {
      const double dd = dot(tr.delta.row(i), tr.delta.row(i));
      const double w = t.mu * t.mu * n * n + dd;
      if (!(w > 0.0)) throw DegenerateStateError("slot " + std::to_string(i) + " collapses to zero");
      tr.beta[i] = n / std::sqrt(w);
    }
    const double intensity = opts.normalize_read ? c[i] / n : c[i];
    tr.k_hat[i] = t.gamma * tr.beta[i] * intensity;
  }
  return out;
}

NormalizeResult normalize_update(const StateMatrix& prev, const Mat& delta, double mu) {
  if (delta.rows() != prev.slots() || delta.cols() != prev.dim()) {
    throw ShapeError("normalize_update: delta " + delta.shape_str() + " vs state");
  }
  NormalizeResult out{prev, Vec(prev.slots())};
  for (std::size_t i = 0; i < prev.slots(); ++i) {
    const auto s = prev.slot(i);
    const auto dl = delta.row(i);
    const double nn = dot(s, s);
    const double dd = dot(dl, dl);
#ifndef NDEBUG
    assert(std::abs(dot(s, dl)) <= 1e-8 * std::sqrt(nn * dd) + 1e-300);
#endif
    const double w = mu * mu * nn + dd;
    if (!(w > 0.0)) {
      throw DegenerateStateError("normalize_update: slot " + std::to_string(i) +
                                 " would collapse to zero");
    }
    const double beta = std::sqrt(nn / w);
    out.beta[i] = beta;
    auto dst = out.state.slot(i);
    for (std::size_t a = 0; a < dst.size(); ++a) dst[a] = beta * (mu * s[a] + dl[a]);
  }
  return out;
}

StepResult lattice_step(const StateMatrix& S, const TokenTriple& t, Mode mode,
                        const StepOptions& opts) {
  GradientResult g = osr_gradient(S, t, mode, opts);
  StepTrace& tr = g.trace;
  StateMatrix next(S.slots(), S.dim());
  // s_i' = (mu beta_i + h_hat_i k_hat_i) s_i - k_hat_i h
  for (std::size_t i = 0; i < S.slots(); ++i) {
    const double keep = t.mu * tr.beta[i] + (opts.normalize_read ? tr.h_hat[i] * tr.k_hat[i] : 0.0);
    const auto s = S.slot(i);
    auto dst = next.slot(i);
    for (std::size_t a = 0; a < dst.size(); ++a) dst[a] = keep * s[a] - tr.k_hat[i] * tr.h[a];
  }
  Vec y = next.read(t.q);
  return {std::move(next), std::move(y), std::move(tr)};
}

ScanResult lattice_scan(const StateMatrix& S0, std::span<const TokenTriple> tokens, Mode mode,
                        bool keep_traces) {
  if (tokens.empty()) throw std::invalid_argument("lattice_scan: empty sequence");
  ScanResult out{S0, {}, {}};
  out.outputs.reserve(tokens.size());
  if (keep_traces) out.traces.reserve(tokens.size());
  for (const TokenTriple& t : tokens) {
    StepResult r = lattice_step(out.state, t, mode);
    out.state = std::move(r.state);
    out.outputs.push_back(std::move(r.y));
    if (keep_traces) out.traces.push_back(std::move(r.trace));
  }
  return out;
}

double soft_threshold(double x, double tau) {
  if (tau < 0.0) throw std::invalid_argument("soft_threshold: negative threshold");
  const double mag = std::abs(x) - tau;
  if (mag <= 0.0) return 0.0;
  return x > 0.0 ? mag : -mag;
}

StateMatrix ista_step(const StateMatrix& S, const TokenTriple& t, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("ista_step: negative lambda");
  const GradientResult g = osr_gradient(S, t, Mode::Dec);
  StateMatrix next = S;
  next.mat() -= g.grad * t.gamma;
  const double tau = t.gamma * lambda;
  for (double& x : next.mat().storage()) x = soft_threshold(x, tau);
  return next;
}

}  // namespace lattice
