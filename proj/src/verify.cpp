// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <stdexcept>

#include "lattice/baselines.hpp"
#include "lattice/chunkwise.hpp"
#include "lattice/model.hpp"
#include "lattice/recurrence.hpp"
#include "lattice/training.hpp"

namespace lattice {

namespace {

using Rng = std::mt19937_64;

constexpr Mode kModes[] = {Mode::Dec, Mode::Sim, Mode::Enc};

std::size_t draw_dim(Rng& rng, std::size_t lo = 2, std::size_t hi = 16) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vec gaussian_vec(Rng& rng, std::size_t n) {
  std::normal_distribution<double> normal;
  Vec v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

Mat gaussian_mat(Rng& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<double> normal;
  Mat m(r, c);
  for (double& x : m.storage()) x = normal(rng);
  return m;
}

// Slots with norms spread over [0.5, 2] so nothing relies on unit slots.
StateMatrix random_state(Rng& rng, std::size_t m, std::size_t d) {
  StateMatrix S = init_state(m, d, rng());
  for (std::size_t i = 0; i < m; ++i) {
    const double r = uniform(rng, 0.5, 2.0);
    for (double& x : S.slot(i)) x *= r;
  }
  return S;
}

TokenTriple random_token(Rng& rng, std::size_t m, std::size_t d, double gamma_hi = 1.0,
                         double mu_lo = 0.5) {
  TokenTriple t{gaussian_vec(rng, m), gaussian_vec(rng, d), gaussian_vec(rng, m), 0.0, 1.0};
  t.gamma = uniform(rng, 0.0, gamma_hi);
  t.mu = uniform(rng, mu_lo, 1.0);
  return t;
}

std::vector<TokenTriple> random_sequence(Rng& rng, std::size_t T, std::size_t m, std::size_t d,
                                         double gamma_hi, double mu_lo) {
  std::vector<TokenTriple> out;
  out.reserve(T);
  for (std::size_t t = 0; t < T; ++t) out.push_back(random_token(rng, m, d, gamma_hi, mu_lo));
  return out;
}

// Unit-norm keys and queries. With raw Gaussian keys and d << m the Dec
// recurrence amplifies rounding by up to 1e5 over 32 steps, which no second
// evaluation order can match to 1e-10.
void normalize_keys(std::vector<TokenTriple>& tokens) {
  for (TokenTriple& t : tokens) {
    for (Vec* v : {&t.k, &t.q}) {
      const double n = norm2(*v);
      for (double& x : *v) x /= n;
    }
  }
}

// max |a - b| / max(max |a|, max |b|)
double scaled_diff(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max({den, std::abs(a[i]), std::abs(b[i])});
  }
  return den > 0.0 ? num / den : num;
}

double scaled_diff(const Mat& a, const Mat& b) {
  if (!a.same_shape(b)) throw ShapeError("scaled_diff: " + a.shape_str() + " vs " + b.shape_str());
  return scaled_diff(a.storage(), b.storage());
}

Vec flatten(const std::vector<Vec>& rows) {
  Vec out;
  for (const Vec& r : rows) out.insert(out.end(), r.begin(), r.end());
  return out;
}

// Central differences of f over every entry of X.
Mat numeric_gradient(const Mat& X, const std::function<double(const Mat&)>& f, double h) {
  Mat g(X.rows(), X.cols());
  Mat probe = X;
  for (std::size_t i = 0; i < X.size(); ++i) {
    const double saved = probe.data()[i];
    probe.data()[i] = saved + h;
    const double up = f(probe);
    probe.data()[i] = saved - h;
    const double down = f(probe);
    probe.data()[i] = saved;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

std::string fmt(const char* format, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, format, a, b);
  return buf;
}

SuiteResult finish(std::string name, double metric, double threshold, std::string detail) {
  SuiteResult r;
  r.name = std::move(name);
  r.metric = metric;
  r.threshold = threshold;
  r.passed = std::isfinite(metric) && metric <= threshold;
  r.detail = std::move(detail);
  return r;
}

using SuiteFn = SuiteResult (*)(std::uint64_t);

struct SuiteEntry {
  const char* name;
  SuiteFn fn;
};

const SuiteEntry kSuites[] = {
    {"orthogonality", [](std::uint64_t s) { return verify_orthogonality(s); }},
    {"sphere", [](std::uint64_t s) { return verify_sphere(s); }},
    {"gradient", [](std::uint64_t s) { return verify_gradient(s); }},
    {"chunk-exact", [](std::uint64_t s) { return verify_chunk_exact(s); }},
    {"beta-chunk", [](std::uint64_t s) { return verify_beta_chunk(s); }},
    {"delta-rule", [](std::uint64_t s) { return verify_delta_rule(s); }},
    {"objective", [](std::uint64_t s) { return verify_objective(s); }},
    {"gradcheck", [](std::uint64_t s) { return verify_gradcheck(s); }},
    {"normalization", [](std::uint64_t s) { return verify_normalization(s); }},
};

SuiteResult timed(const SuiteEntry& e, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  try {
    r = e.fn(seed);
  } catch (const std::exception& ex) {
    r = finish(e.name, INFINITY, 0.0, std::string("exception: ") + ex.what());
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const SuiteEntry& e : kSuites) out.emplace_back(e.name);
    return out;
  }();
  return names;
}

SuiteResult run_suite(std::string_view name, std::uint64_t seed) {
  for (const SuiteEntry& e : kSuites)
    if (name == e.name) return timed(e, seed);
  throw std::invalid_argument("unknown suite '" + std::string(name) + "'");
}

std::vector<SuiteResult> run_suites(std::string_view filter, std::uint64_t seed) {
  std::vector<SuiteResult> out;
  for (const SuiteEntry& e : kSuites)
    if (std::string_view(e.name).find(filter) != std::string_view::npos) out.push_back(timed(e, seed));
  if (out.empty()) throw std::invalid_argument("no suite matches '" + std::string(filter) + "'");
  return out;
}

std::string format_suite_table(const std::vector<SuiteResult>& results) {
  std::string out;
  char line[512];
  std::snprintf(line, sizeof line, "%-14s %-6s %12s %12s %9s  %s\n", "suite", "status", "metric",
                "threshold", "seconds", "detail");
  out += line;
  for (const SuiteResult& r : results) {
    std::snprintf(line, sizeof line, "%-14s %-6s %12.3e %12.3e %9.3f  %s\n", r.name.c_str(),
                  r.passed ? "PASS" : "FAIL", r.metric, r.threshold, r.seconds, r.detail.c_str());
    out += line;
  }
  return out;
}

SuiteResult verify_orthogonality(std::uint64_t seed, std::size_t draws_per_mode) {
  Rng rng(seed ^ 0x0a7e);
  double worst = 0.0;
  std::size_t checked = 0;
  for (Mode mode : kModes) {
    for (std::size_t n = 0; n < draws_per_mode; ++n) {
      const std::size_t d = draw_dim(rng), m = draw_dim(rng);
      const StateMatrix S = random_state(rng, m, d);
      const StepResult r = lattice_step(S, random_token(rng, m, d), mode);
      for (std::size_t i = 0; i < m; ++i) {
        const auto dl = r.trace.delta.row(i);
        const double scale = norm2(dl) * S.slot_norm(i);
        const double inner = std::abs(dot(dl, S.slot(i)));
        if (scale > 0.0) worst = std::max(worst, inner / scale);
        else if (inner > 0.0) worst = INFINITY;
        ++checked;
      }
    }
  }
  return finish("orthogonality", worst, 1e-9,
                fmt("max |<ds,s>|/(|ds||s|) over %.0f slots", static_cast<double>(checked)));
}

SuiteResult verify_sphere(std::uint64_t seed, std::size_t steps) {
  Rng rng(seed ^ 0x5e7e);
  const std::size_t m = 16, d = 16;
  double worst = 0.0;
  for (double mu : {1.0, 0.99}) {
    for (Mode mode : kModes) {
      StateMatrix S = init_state(m, d, rng());
      for (std::size_t t = 0; t < steps; ++t) {
        TokenTriple tok = random_token(rng, m, d);
        tok.mu = mu;
        S = lattice_step(S, tok, mode).state;
        for (std::size_t i = 0; i < m; ++i) worst = std::max(worst, std::abs(S.slot_norm(i) - 1.0));
      }
    }
  }
  return finish("sphere", worst, 1e-6,
                fmt("max ||s_i| - 1| over %.0f steps x 3 modes x mu {1, 0.99}",
                    static_cast<double>(steps)));
}

SuiteResult verify_gradient(std::uint64_t seed, std::size_t instances) {
  Rng rng(seed ^ 0x97ad);
  double worst = 0.0;
  std::string where;
  for (Mode mode : kModes) {
    for (std::size_t n = 0; n < instances; ++n) {
      const std::size_t d = draw_dim(rng), m = draw_dim(rng);
      const StateMatrix S = random_state(rng, m, d);
      const TokenTriple t = random_token(rng, m, d);
      const Mat analytic = osr_gradient(S, t, mode).grad;
      const Mat numeric = numeric_gradient(
          S.mat(), [&](const Mat& X) { return compression_loss(StateMatrix(X), t, mode); }, 1e-5);
      const double err = scaled_diff(analytic, numeric);
      if (err > worst) {
        worst = err;
        where = std::string(mode_name(mode)) + " d=" + std::to_string(d) + " m=" + std::to_string(m);
      }
    }
  }
  return finish("gradient", worst, 1e-6, "closed form vs central differences; worst at " + where);
}

SuiteResult verify_chunk_exact(std::uint64_t seed, std::size_t sequences) {
  Rng rng(seed ^ 0xc4e1);
  double worst = 0.0;
  for (std::size_t n = 0; n < sequences; ++n) {
    const Mode mode = kModes[n % 3];
    const std::size_t d = draw_dim(rng), m = draw_dim(rng);
    const StateMatrix S0 = random_state(rng, m, d);
    auto tokens = random_sequence(rng, 32, m, d, 1.0, 0.5);
    normalize_keys(tokens);
    const ScanResult ref = lattice_scan(S0, tokens, mode, false);
    const Vec ref_y = flatten(ref.outputs);
    for (const ChunkScanResult& r : {scan_chunkwise_full(S0, tokens, mode, 1),
                                     scan_chunkwise_rank1(S0, tokens, mode, 1)}) {
      worst = std::max(worst, scaled_diff(flatten(r.outputs), ref_y));
      worst = std::max(worst, scaled_diff(r.state.mat(), ref.state.mat()));
    }
  }
  return finish("chunk-exact", worst, 1e-10,
                fmt("full and rank-one forms at C=1 vs sequential, %.0f sequences of T=32, unit keys",
                    static_cast<double>(sequences)));
}

SuiteResult verify_beta_chunk(std::uint64_t seed, std::size_t chunks) {
  Rng rng(seed ^ 0xbe7a);
  double worst = 0.0;
  for (std::size_t n = 0; n < chunks; ++n) {
    const Mode mode = kModes[n % 3];
    const std::size_t d = draw_dim(rng), m = draw_dim(rng), C = draw_dim(rng, 1, 16);
    const StateMatrix start = random_state(rng, m, d);
    const auto tokens = random_sequence(rng, C, m, d, 1.0, 0.5);
    const ChunkWorkspace ws = prepare_chunk(start, tokens, mode, ChunkNormalization::PerToken);
    Vec gamma, mu;
    for (const TokenTriple& t : tokens) {
      gamma.push_back(t.gamma);
      mu.push_back(t.mu);
    }
    const BetaChunkResult bc = beta_chunk(start, ws.H, ws.Htilde, ws.Kraw, gamma, mu);
    // Materialized oracle: the explicit projected step of every token taken
    // from the chunk-start state.
    Mat direct(C, m);
    for (std::size_t t = 0; t < C; ++t) {
      const Mat delta = osr_gradient(start, tokens[t], mode).trace.delta;
      for (std::size_t i = 0; i < m; ++i) direct(t, i) = dot(delta.row(i), delta.row(i));
    }
    worst = std::max(worst, scaled_diff(bc.Ds, direct));
  }
  return finish("beta-chunk", worst, 1e-9,
                fmt("chunk |delta|^2 identity vs materialized steps, %.0f chunks",
                    static_cast<double>(chunks)));
}

SuiteResult verify_delta_rule(std::uint64_t seed, std::size_t steps) {
  Rng rng(seed ^ 0xde17);
  const StepOptions plain{false, false};
  double worst = 0.0;
  for (std::size_t n = 0; n < steps; ++n) {
    const std::size_t d = draw_dim(rng), m = draw_dim(rng);
    const Mat S = gaussian_mat(rng, m, d);
    TokenTriple t = random_token(rng, m, d);
    t.mu = 1.0;
    const StepResult r = lattice_step(StateMatrix(S), t, Mode::Dec, plain);
    const Mat ref = baseline_update(BaselineKind::DeltaNet, S, t);
    worst = std::max(worst, max_abs_diff(r.state.mat(), ref));
  }
  return finish("delta-rule", worst, 1e-10,
                fmt("unnormalized Dec step vs deltanet, max abs diff over %.0f steps",
                    static_cast<double>(steps)));
}

SuiteResult verify_objective(std::uint64_t seed, std::size_t instances) {
  Rng rng(seed ^ 0x0b1e);
  double worst = 0.0;
  std::string where;
  for (BaselineKind kind : {BaselineKind::LA, BaselineKind::Mamba2, BaselineKind::GLA,
                            BaselineKind::DeltaNet, BaselineKind::GatedDeltaNet,
                            BaselineKind::RWKV7, BaselineKind::TTT}) {
    for (std::size_t n = 0; n < instances; ++n) {
      const std::size_t d = draw_dim(rng), m = draw_dim(rng);
      const Mat S = gaussian_mat(rng, m, d);
      TokenTriple t = random_token(rng, m, d);
      t.gamma = uniform(rng, 0.05, 1.0);
      Vec mu_vec;
      if (uses_slot_decay(kind))
        for (std::size_t i = 0; i < m; ++i) mu_vec.push_back(uniform(rng, 0.5, 1.0));
      const Mat update = baseline_update(kind, S, t, mu_vec);
      const OnlineObjective obj = baseline_objective_setup(kind, S, t, mu_vec);
      const Mat g = numeric_gradient(
          obj.decayed, [&](const Mat& X) { return baseline_objective(kind, X, t, mu_vec); }, 1e-5);
      const Mat predicted = obj.decayed - g * obj.eta;
      const double err = scaled_diff(update, predicted);
      if (err > worst) {
        worst = err;
        where = std::string(baseline_name(kind));
      }
    }
  }
  return finish("objective", worst, 1e-6,
                "update vs decay - eta * numeric gradient of the objective; worst " + where);
}

SuiteResult verify_gradcheck(std::uint64_t seed) {
  struct Case {
    const char* mixer;
    ScanKind scan;
    std::size_t C;
  };
  const Case cases[] = {
      {"lattice-dec", ScanKind::Sequential, 1}, {"lattice-dec", ScanKind::ChunkFull, 2},
      {"lattice-dec", ScanKind::ChunkRank1, 2}, {"la", ScanKind::Sequential, 1},
      {"deltanet", ScanKind::Sequential, 1},    {"ttt", ScanKind::Sequential, 1},
  };
  Rng rng(seed ^ 0x9c4c);
  std::uniform_int_distribution<int> tok(0, 10);
  std::vector<Sequence> batch(2);
  for (Sequence& s : batch) {
    for (int t = 0; t < 6; ++t) {
      s.tokens.push_back(tok(rng));
      s.targets.push_back(tok(rng));
      s.mask.push_back(t % 3 != 0);
    }
  }
  double worst = 0.0;
  std::string detail;
  for (const Case& c : cases) {
    ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.d_model = 8;
    cfg.n_blocks = 2;
    cfg.n_heads = 1;
    cfg.m = 4;
    cfg.d_head = 8;
    cfg.conv_width = 2;
    cfg.mixer = c.mixer;
    cfg.scan = c.scan;
    cfg.chunk_size = c.C;
    cfg.seed = seed;
    Model model(cfg);
    const GradCheckReport rep = grad_check(model, batch, 1e-5);
    worst = std::max(worst, rep.max_rel_error);
    if (!detail.empty()) detail += ", ";
    detail += std::string(c.mixer) + "/" + std::string(scan_kind_name(c.scan)) +
              fmt(" %.1e", rep.max_rel_error);
  }
  return finish("gradcheck", worst, 1e-5, detail);
}

SuiteResult verify_normalization(std::uint64_t seed, std::size_t sequences) {
  Rng rng(seed ^ 0x2042);
  const std::size_t m = 16, d = 16, T = 64, C = 16;
  double dev_token = 0.0, dev_chunk = 0.0;
  for (std::size_t n = 0; n < sequences; ++n) {
    const Mode mode = kModes[n % 3];
    const StateMatrix S0 = init_state(m, d, rng());
    const auto tokens = random_sequence(rng, T, m, d, 0.5, 0.9);
    const ScanResult ref = lattice_scan(S0, tokens, mode, false);
    auto deviation = [&](ChunkNormalization norm) {
      const ChunkScanResult r = scan_chunkwise_full(S0, tokens, mode, C, {norm, true});
      double acc = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        double sq = 0.0;
        for (std::size_t a = 0; a < d; ++a) sq += std::pow(r.outputs[t][a] - ref.outputs[t][a], 2);
        acc += std::sqrt(sq);
      }
      return acc / static_cast<double>(T);
    };
    dev_token += deviation(ChunkNormalization::PerToken);
    dev_chunk += deviation(ChunkNormalization::PerChunk);
  }
  dev_token /= static_cast<double>(sequences);
  dev_chunk /= static_cast<double>(sequences);
  // metric <= 1 means per-token normalization deviates no more than per-chunk.
  const double ratio = dev_chunk > 0.0 ? dev_token / dev_chunk : (dev_token > 0.0 ? INFINITY : 0.0);
  return finish("normalization", ratio, 1.0,
                fmt("C=16 mean output deviation: per-token %.4g, per-chunk %.4g", dev_token,
                    dev_chunk));
}

}  // namespace lattice
