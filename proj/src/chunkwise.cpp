// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/chunkwise.hpp"

#include <cmath>
#include <stdexcept>

namespace lattice {

OmegaResult build_omega(const Mat& decays) {
  const std::size_t C = decays.rows(), m = decays.cols();
  OmegaResult out{Mat(C, m), Tensor3(C, C, m)};
  for (std::size_t n = 0; n < m; ++n) {
    double run = 1.0;
    for (std::size_t t = 0; t < C; ++t) {
      const double g = decays(t, n);
      if (!(g > 0.0) || !std::isfinite(g)) {
        throw std::domain_error("build_omega: decay at (" + std::to_string(t) + ", " +
                                std::to_string(n) + ") is not positive");
      }
      run *= g;
      out.a(t, n) = run;
    }
  }
  for (std::size_t j = 0; j < C; ++j)
    for (std::size_t i = 0; i <= j; ++i)
      for (std::size_t n = 0; n < m; ++n)
        out.omega(j, i, n) = i == j ? 1.0 : out.a(j, n) / out.a(i, n);
  return out;
}

BetaChunkResult beta_chunk(const StateMatrix& chunk_start, const Mat& H, const Mat& Htilde,
                           const Mat& Kraw, std::span<const double> gamma,
                           std::span<const double> mu) {
  const std::size_t C = H.rows(), m = chunk_start.slots();
  if (H.cols() != chunk_start.dim() || Htilde.rows() != C || Htilde.cols() != m ||
      !Kraw.same_shape(Htilde) || gamma.size() != C || mu.size() != C) {
    throw ShapeError("beta_chunk: inconsistent chunk shapes");
  }
  Vec nn(m);  // diag(S'^T S')
  for (std::size_t i = 0; i < m; ++i) nn[i] = dot(chunk_start.slot(i), chunk_start.slot(i));
  BetaChunkResult out{Mat(C, m), Mat(C, m)};
  for (std::size_t t = 0; t < C; ++t) {
    const double hh = dot(H.row(t), H.row(t));  // diag(H H^T)
    for (std::size_t i = 0; i < m; ++i) {
      const double full = Kraw(t, i) * Kraw(t, i) * hh;
      const double para = nn[i] * std::pow(Htilde(t, i) * Kraw(t, i), 2);
      double ds = full - para;
      if (ds < -1e-9 * std::max(1.0, full)) {
        throw std::runtime_error("beta_chunk: negative |delta|^2 " + std::to_string(ds) +
                                 " at step " + std::to_string(t) + ", slot " + std::to_string(i));
      }
      ds = std::max(ds, 0.0) * gamma[t] * gamma[t];
      out.Ds(t, i) = ds;
      const double w = mu[t] * mu[t] * nn[i] + ds;
      if (!(w > 0.0)) throw DegenerateStateError("beta_chunk: slot collapses to zero");
      out.beta(t, i) = std::sqrt(nn[i] / w);
    }
  }
  return out;
}

GlaResult gla_intra_chunk(const Mat& Q, const Mat& K, const Mat& V, const Mat& G, const Mat& S0) {
  const std::size_t C = Q.rows(), m = Q.cols(), d = V.cols();
  if (!K.same_shape(Q) || !G.same_shape(Q) || V.rows() != C || S0.rows() != m || S0.cols() != d) {
    throw ShapeError("gla_intra_chunk: inconsistent shapes");
  }
  if (!G.all_finite()) throw std::domain_error("gla_intra_chunk: non-finite gate");

  // Y = (Q . B) S0 + A V with B the running gate product and
  // A[t,j] = sum_n Q[t,n] K[j,n] prod_{j<i<=t} G[i,n] on j <= t.
  Mat QB = Q;
  Vec run(m, 1.0);
  for (std::size_t t = 0; t < C; ++t)
    for (std::size_t n = 0; n < m; ++n) {
      run[n] *= G(t, n);
      QB(t, n) *= run[n];
    }
  Mat A(C, C);
  Mat W(C, m);  // K[j,n] * prod_{j<i<C} G[i,n], the weights of token j in the final state
  Vec seg(m);
  for (std::size_t j = 0; j < C; ++j) {
    std::fill(seg.begin(), seg.end(), 1.0);
    for (std::size_t t = j; t < C; ++t) {
      double acc = 0.0;
      for (std::size_t n = 0; n < m; ++n) {
        if (t > j) seg[n] *= G(t, n);
        acc += Q(t, n) * K(j, n) * seg[n];
      }
      A(t, j) = acc;
    }
    for (std::size_t n = 0; n < m; ++n) W(j, n) = K(j, n) * seg[n];
  }

  GlaResult out{Mat(m, d), matmul(QB, S0)};
  out.Y += matmul(A, V);
  for (std::size_t n = 0; n < m; ++n) {
    auto dst = out.state.row(n);
    const auto src = S0.row(n);
    for (std::size_t a = 0; a < d; ++a) dst[a] = run[n] * src[a];
  }
  out.state += matmul(W.transpose(), V);
  return out;
}

ChunkWorkspace prepare_chunk(const StateMatrix& start, std::span<const TokenTriple> chunk,
                             Mode mode, ChunkNormalization norm) {
  check_slots(start);
  const std::size_t C = chunk.size(), m = start.slots(), d = start.dim();
  ChunkWorkspace ws;
  ws.C = C;
  ws.K = Mat(C, m);
  ws.Q = Mat(C, m);
  ws.V = Mat(C, d);
  Vec gamma(C), mu(C);
  for (std::size_t t = 0; t < C; ++t) {
    check_token(start, chunk[t]);
    std::copy(chunk[t].k.begin(), chunk[t].k.end(), ws.K.row(t).begin());
    std::copy(chunk[t].q.begin(), chunk[t].q.end(), ws.Q.row(t).begin());
    std::copy(chunk[t].v.begin(), chunk[t].v.end(), ws.V.row(t).begin());
    gamma[t] = chunk[t].gamma;
    mu[t] = chunk[t].mu;
  }

  const Vec norms = start.slot_norms();
  Mat phi = start.mat();
  for (std::size_t i = 0; i < m; ++i)
    for (double& x : phi.row(i)) x /= norms[i];

  Mat coef;  // writing intensity c, C x m
  switch (mode) {
    case Mode::Dec:
      ws.H = matmul(ws.K, phi) - ws.V;
      coef = ws.K;
      break;
    case Mode::Sim:
      ws.H = ws.V * -1.0;
      coef = ws.K;
      break;
    case Mode::Enc:
      ws.H = ws.V;
      coef = matmul(ws.V, phi.transpose()) - ws.K;
      break;
  }

  ws.Htilde = matmul(ws.H, start.mat().transpose());
  ws.Kraw = coef;
  for (std::size_t t = 0; t < C; ++t)
    for (std::size_t i = 0; i < m; ++i) {
      ws.Htilde(t, i) /= norms[i] * norms[i];
      ws.Kraw(t, i) /= norms[i];
    }

  BetaChunkResult b = beta_chunk(start, ws.H, ws.Htilde, ws.Kraw, gamma, mu);
  ws.Ds = std::move(b.Ds);
  ws.beta = norm == ChunkNormalization::PerToken ? std::move(b.beta) : Mat(C, m, 1.0);

  ws.Khat = Mat(C, m);
  ws.G_gate = Mat(C, m);
  for (std::size_t t = 0; t < C; ++t)
    for (std::size_t i = 0; i < m; ++i) {
      ws.Khat(t, i) = gamma[t] * ws.beta(t, i) * ws.Kraw(t, i);
      ws.G_gate(t, i) = mu[t] * ws.beta(t, i) + ws.Htilde(t, i) * ws.Khat(t, i);
    }
  return ws;
}

namespace {

std::vector<TokenTriple> padded_tokens(std::span<const TokenTriple> tokens, std::size_t C,
                                       const StateMatrix& S0, bool pad) {
  if (C == 0) throw std::invalid_argument("chunk size must be >= 1");
  if (tokens.empty()) throw std::invalid_argument("chunk scan: empty sequence");
  std::vector<TokenTriple> out(tokens.begin(), tokens.end());
  const std::size_t rem = out.size() % C;
  if (rem == 0) return out;
  if (!pad) {
    throw ShapeError("sequence length " + std::to_string(out.size()) +
                     " is not a multiple of chunk size " + std::to_string(C));
  }
  TokenTriple noop{Vec(S0.slots(), 0.0), Vec(S0.dim(), 0.0), Vec(S0.slots(), 0.0), 0.0, 1.0};
  out.resize(out.size() + (C - rem), noop);
  return out;
}

void restore_norms(StateMatrix& S, const Vec& norms) {
  for (std::size_t i = 0; i < S.slots(); ++i) {
    const double n = S.slot_norm(i);
    if (!(n > 0.0)) throw DegenerateStateError("per-chunk normalization: slot collapsed");
    for (double& x : S.slot(i)) x *= norms[i] / n;
  }
}

void append_rows(std::vector<Vec>& outputs, const Mat& Y, std::size_t limit) {
  for (std::size_t t = 0; t < Y.rows() && outputs.size() < limit; ++t) {
    outputs.emplace_back(Y.row(t).begin(), Y.row(t).end());
  }
}

}  // namespace

ChunkScanResult scan_chunkwise_full(const StateMatrix& S0, std::span<const TokenTriple> tokens,
                                    Mode mode, std::size_t C, const ChunkOptions& opts) {
  const std::vector<TokenTriple> seq = padded_tokens(tokens, C, S0, opts.pad);
  const std::size_t m = S0.slots(), d = S0.dim();
  ChunkScanResult out{S0, {}};
  out.outputs.reserve(tokens.size());

  for (std::size_t b = 0; b < seq.size(); b += C) {
    const std::span<const TokenTriple> chunk(seq.data() + b, C);
    const StateMatrix& start = out.state;
    const Vec start_norms = start.slot_norms();
    ChunkWorkspace ws = prepare_chunk(start, chunk, mode, opts.normalization);

    Mat decays(C, m);
    for (std::size_t t = 0; t < C; ++t)
      for (std::size_t i = 0; i < m; ++i) decays(t, i) = ws.beta(t, i) * chunk[t].mu;
    OmegaResult om = build_omega(decays);
    ws.a = std::move(om.a);
    ws.Omega = std::move(om.omega);

    // F[i,n] = sum_t (Htilde . Khat)[t,n] Omega[i,t,n]
    ws.F = Mat(C, m);
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t t = 0; t <= i; ++t)
        for (std::size_t n = 0; n < m; ++n)
          ws.F(i, n) += ws.Htilde(t, n) * ws.Khat(t, n) * ws.Omega(i, t, n);
    // f = einsum("C m, C m -> m", Htilde, Khat . Omega_C)
    ws.f.assign(m, 0.0);
    Mat khat_omega_last(C, m);
    for (std::size_t t = 0; t < C; ++t)
      for (std::size_t n = 0; n < m; ++n) {
        khat_omega_last(t, n) = ws.Khat(t, n) * ws.Omega(C - 1, t, n);
        ws.f[n] += ws.Htilde(t, n) * khat_omega_last(t, n);
      }
    // P[i,j] = sum_n Q[i,n] Khat[j,n] Omega[i,j,n]
    ws.P = Mat(C, C);
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        for (std::size_t n = 0; n < m; ++n) acc += ws.Q(i, n) * ws.Khat(j, n) * ws.Omega(i, j, n);
        ws.P(i, j) = acc;
      }

    Mat gated_q = ws.Q;
    for (std::size_t t = 0; t < C; ++t)
      for (std::size_t n = 0; n < m; ++n) gated_q(t, n) *= ws.a(t, n) + ws.F(t, n);
    Mat Y = matmul(gated_q, start.mat()) - matmul(ws.P, ws.H);

    Mat next(m, d);
    for (std::size_t n = 0; n < m; ++n) {
      const double keep = ws.a(C - 1, n) + ws.f[n];
      const auto src = start.slot(n);
      auto dst = next.row(n);
      for (std::size_t a = 0; a < d; ++a) dst[a] = keep * src[a];
    }
    next -= matmul(khat_omega_last.transpose(), ws.H);

    StateMatrix next_state(std::move(next));
    if (opts.normalization == ChunkNormalization::PerChunk) restore_norms(next_state, start_norms);
    out.state = std::move(next_state);
    append_rows(out.outputs, Y, tokens.size());
  }
  return out;
}

ChunkScanResult scan_chunkwise_rank1(const StateMatrix& S0, std::span<const TokenTriple> tokens,
                                     Mode mode, std::size_t C, const ChunkOptions& opts) {
  const std::vector<TokenTriple> seq = padded_tokens(tokens, C, S0, opts.pad);
  ChunkScanResult out{S0, {}};
  out.outputs.reserve(tokens.size());

  for (std::size_t b = 0; b < seq.size(); b += C) {
    const std::span<const TokenTriple> chunk(seq.data() + b, C);
    const Vec start_norms = out.state.slot_norms();
    const ChunkWorkspace ws = prepare_chunk(out.state, chunk, mode, opts.normalization);
    GlaResult g = gla_intra_chunk(ws.Q, ws.Khat * -1.0, ws.H, ws.G_gate, out.state.mat());
    StateMatrix next_state(std::move(g.state));
    if (opts.normalization == ChunkNormalization::PerChunk) restore_norms(next_state, start_norms);
    out.state = std::move(next_state);
    append_rows(out.outputs, g.Y, tokens.size());
  }
  return out;
}

}  // namespace lattice
