// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/autodiff.hpp"

#include "lattice/chunkwise.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>

namespace lattice::ad {

namespace {

thread_local bool g_corrupt = false;

void require_same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw std::logic_error("vars live on different tapes");
}

void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class F>
Mat map(const Mat& a, F f) {
  Mat out = a;
  for (double& x : out.storage()) x = f(x);
  return out;
}

}  // namespace

const Mat& Var::value() const { return tape->value(id); }

ScopedCorruptAdjoint::ScopedCorruptAdjoint() : previous_(g_corrupt) { g_corrupt = true; }
ScopedCorruptAdjoint::~ScopedCorruptAdjoint() { g_corrupt = previous_; }
bool adjoint_corrupted() { return g_corrupt; }

Var Tape::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
  return {this, nodes_.size() - 1};
}

Var Tape::param(const Mat& value, Mat* grad_sink) {
  if (grad_sink && !grad_sink->same_shape(value)) {
    throw ShapeError("param: gradient sink " + grad_sink->shape_str() + " vs value " +
                     value.shape_str());
  }
  nodes_.push_back(Node{value, {}, grad_enabled_ && grad_sink != nullptr, grad_sink, {}});
  return {this, nodes_.size() - 1};
}

Var Tape::record(Mat value, std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  for (Var v : inputs) {
    if (v.tape != this) throw std::logic_error("record: input from another tape");
    needs = needs || nodes_[v.id].needs_grad;
  }
  needs = needs && grad_enabled_;
  nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backward) : Backward{}});
  return {this, nodes_.size() - 1};
}

Var Tape::record(Mat value, const std::vector<Var>& inputs, Backward backward) {
  bool needs = false;
  for (Var v : inputs) {
    if (v.tape != this) throw std::logic_error("record: input from another tape");
    needs = needs || nodes_[v.id].needs_grad;
  }
  needs = needs && grad_enabled_;
  nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backward) : Backward{}});
  return {this, nodes_.size() - 1};
}

Mat& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Mat(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Mat& g) {
  if (!nodes_[id].needs_grad) return;
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    if (!g.same_shape(n.value)) throw ShapeError("accumulate: adjoint shape mismatch");
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root, double seed) {
  if (root.tape != this) throw std::logic_error("backward: root from another tape");
  if (!grad_enabled_) throw std::logic_error("backward on a tape without gradients");
  const Node& r = nodes_[root.id];
  if (r.value.rows() != 1 || r.value.cols() != 1) throw ShapeError("backward: root must be 1x1");
  if (!r.needs_grad) return;
  grad_buffer(root.id)(0, 0) += seed;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.sink) *n.sink += n.grad;
  }
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  return t.record(lattice::matmul(a.value(), b.value()), {a, b},
                  [ia = a.id, ib = b.id](Tape& t, std::size_t self) {
                    const Mat& g = t.grad(self);
                    if (t.needs_grad(ia)) {
                      Mat ga = lattice::matmul(g, t.value(ib).transpose());
                      if (g_corrupt) ga *= 1.0 + kCorruptionFactor;
                      t.accumulate(ia, ga);
                    }
                    if (t.needs_grad(ib)) t.accumulate(ib, lattice::matmul(t.value(ia).transpose(), g));
                  });
}

Var transpose(Var a) {
  return a.tape->record(a.value().transpose(), {a}, [ia = a.id](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).transpose());
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  return a.tape->record(a.value() + b.value(), {a, b}, [ia = a.id, ib = b.id](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  return a.tape->record(a.value() - b.value(), {a, b}, [ia = a.id, ib = b.id](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    if (t.needs_grad(ib)) t.accumulate(ib, t.grad(self) * -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  require_shape(av.same_shape(bv), "mul: " + av.shape_str() + " vs " + bv.shape_str());
  Mat out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= bv.data()[i];
  return a.tape->record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& t, std::size_t self) {
    const Mat& g = t.grad(self);
    for (auto [x, y] : {std::pair{ia, ib}, std::pair{ib, ia}}) {
      if (!t.needs_grad(x)) continue;
      Mat gx = g;
      const Mat& other = t.value(y);
      for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] *= other.data()[i];
      t.accumulate(x, gx);
    }
  });
}

Var scale(Var a, double s) {
  return a.tape->record(a.value() * s, {a}, [ia = a.id, s](Tape& t, std::size_t self) {
    if (t.needs_grad(ia)) t.accumulate(ia, t.grad(self) * s);
  });
}

Var mul_scalar(Var a, Var s) {
  require_same_tape(a, s);
  require_shape(s.rows() == 1 && s.cols() == 1, "mul_scalar: scalar must be 1x1");
  return a.tape->record(a.value() * s.value()(0, 0), {a, s},
                        [ia = a.id, is = s.id](Tape& t, std::size_t self) {
                          const Mat& g = t.grad(self);
                          if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(is)(0, 0));
                          if (t.needs_grad(is)) {
                            double acc = 0.0;
                            const Mat& av = t.value(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) acc += g.data()[i] * av.data()[i];
                            t.accumulate(is, Mat(1, 1, acc));
                          }
                        });
}

Var mul_rowvec(Var a, Var r) {
  require_same_tape(a, r);
  require_shape(r.rows() == 1 && r.cols() == a.cols(), "mul_rowvec: " + a.value().shape_str() +
                                                           " vs " + r.value().shape_str());
  return a.tape->record(hadamard_broadcast_row(a.value(), r.value().row(0)), {a, r},
                        [ia = a.id, ir = r.id](Tape& t, std::size_t self) {
                          const Mat& g = t.grad(self);
                          if (t.needs_grad(ia)) t.accumulate(ia, hadamard_broadcast_row(g, t.value(ir).row(0)));
                          if (t.needs_grad(ir)) {
                            const Mat& av = t.value(ia);
                            Mat gr(1, g.cols());
                            for (std::size_t i = 0; i < g.rows(); ++i)
                              for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j) * av(i, j);
                            t.accumulate(ir, gr);
                          }
                        });
}

Var mul_colvec(Var a, Var c) {
  require_same_tape(a, c);
  require_shape(c.cols() == 1 && c.rows() == a.rows(), "mul_colvec: " + a.value().shape_str() +
                                                           " vs " + c.value().shape_str());
  Vec col(c.value().storage());
  return a.tape->record(hadamard_broadcast_col(a.value(), col), {a, c},
                        [ia = a.id, ic = c.id](Tape& t, std::size_t self) {
                          const Mat& g = t.grad(self);
                          if (t.needs_grad(ia)) t.accumulate(ia, hadamard_broadcast_col(g, t.value(ic).storage()));
                          if (t.needs_grad(ic)) {
                            const Mat& av = t.value(ia);
                            Mat gc(g.rows(), 1);
                            for (std::size_t i = 0; i < g.rows(); ++i) gc(i, 0) = dot(g.row(i), av.row(i));
                            t.accumulate(ic, gc);
                          }
                        });
}

Var add_rowvec(Var a, Var r) {
  require_same_tape(a, r);
  require_shape(r.rows() == 1 && r.cols() == a.cols(), "add_rowvec: shape mismatch");
  Mat out = a.value();
  const auto rv = r.value().row(0);
  for (std::size_t i = 0; i < out.rows(); ++i) axpy(1.0, rv, out.row(i));
  return a.tape->record(std::move(out), {a, r}, [ia = a.id, ir = r.id](Tape& t, std::size_t self) {
    const Mat& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.needs_grad(ir)) {
      Mat gr(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i) axpy(1.0, g.row(i), gr.row(0));
      t.accumulate(ir, gr);
    }
  });
}

Var add_colvec(Var a, Var c) {
  require_same_tape(a, c);
  require_shape(c.cols() == 1 && c.rows() == a.rows(), "add_colvec: shape mismatch");
  Mat out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (double& x : out.row(i)) x += c.value()(i, 0);
  return a.tape->record(std::move(out), {a, c}, [ia = a.id, ic = c.id](Tape& t, std::size_t self) {
    const Mat& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.needs_grad(ic)) {
      Mat gc(g.rows(), 1);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (double x : g.row(i)) gc(i, 0) += x;
      t.accumulate(ic, gc);
    }
  });
}

Var add_const(Var a, double c) {
  return a.tape->record(map(a.value(), [c](double x) { return x + c; }), {a},
                        [ia = a.id](Tape& t, std::size_t self) { t.accumulate(ia, t.grad(self)); });
}

namespace {

// Elementwise op whose derivative is expressed through the input x and output y.
template <class F, class D>
Var unary(Var a, F f, D df) {
  Mat out = map(a.value(), f);
  return a.tape->record(std::move(out), {a}, [ia = a.id, df](Tape& t, std::size_t self) {
    const Mat& g = t.grad(self);
    const Mat& x = t.value(ia);
    const Mat& y = t.value(self);
    Mat gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] *= df(x.data()[i], y.data()[i]);
    t.accumulate(ia, gx);
  });
}

double sigmoid_fn(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Var reciprocal(Var a) {
  return unary(a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Var sigmoid(Var a) {
  return unary(a, sigmoid_fn, [](double, double y) { return y * (1.0 - y); });
}

Var silu(Var a) {
  return unary(a, [](double x) { return x * sigmoid_fn(x); },
               [](double x, double) {
                 const double s = sigmoid_fn(x);
                 return s * (1.0 + x * (1.0 - s));
               });
}

Var gelu(Var a) {
  return unary(a, [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); },
               [](double x, double) {
                 const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
                 return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * pdf;
               });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(Var a) {
  return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var rsqrt(Var a) {
  return unary(a, [](double x) { return 1.0 / std::sqrt(x); },
               [](double x, double y) { return -0.5 * y / x; });
}

Var clamp_min0(Var a) {
  return unary(a, [](double x) { return std::max(x, 0.0); },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var row_sum(Var a) {
  const Mat& av = a.value();
  Mat out(av.rows(), 1);
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (double x : av.row(i)) out(i, 0) += x;
  return a.tape->record(std::move(out), {a}, [ia = a.id](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Mat& g = t.grad(self);
    Mat& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (double& x : ga.row(i)) x += g(i, 0);
  });
}

Var sum_all(Var a) {
  double s = 0.0;
  for (double x : a.value().storage()) s += x;
  return a.tape->record(Mat(1, 1, s), {a}, [ia = a.id](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const double g = t.grad(self)(0, 0);
    for (double& x : t.grad_buffer(ia).storage()) x += g;
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Mat& av = a.value();
  require_shape(count > 0 && start + count <= av.cols(), "slice_cols out of range");
  Mat out(av.rows(), count);
  for (std::size_t i = 0; i < av.rows(); ++i)
    std::copy_n(av.row(i).begin() + start, count, out.row(i).begin());
  return a.tape->record(std::move(out), {a}, [ia = a.id, start, count](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Mat& g = t.grad(self);
    Mat& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < count; ++j) ga(i, start + j) += g(i, j);
  });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Mat& av = a.value();
  require_shape(count > 0 && start + count <= av.rows(), "slice_rows out of range");
  Mat out(count, av.cols(),
          std::vector<double>(av.data() + start * av.cols(), av.data() + (start + count) * av.cols()));
  return a.tape->record(std::move(out), {a}, [ia = a.id, start](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Mat& g = t.grad(self);
    Mat& ga = t.grad_buffer(ia);
    double* dst = ga.data() + start * ga.cols();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g.data()[i];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    require_shape(p.rows() == rows, "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (Var p : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      std::copy(p.value().row(i).begin(), p.value().row(i).end(), out.row(i).begin() + off);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += p.cols();
  }
  return parts[0].tape->record(std::move(out), parts, [ids, offsets](Tape& t, std::size_t self) {
    const Mat& g = t.grad(self);
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (!t.needs_grad(ids[p])) continue;
      Mat& gp = t.grad_buffer(ids[p]);
      for (std::size_t i = 0; i < gp.rows(); ++i)
        for (std::size_t j = 0; j < gp.cols(); ++j) gp(i, j) += g(i, offsets[p] + j);
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t cols = parts[0].cols();
  std::vector<double> data;
  std::vector<std::size_t> ids, offsets;
  for (Var p : parts) {
    require_shape(p.cols() == cols, "concat_rows: column count mismatch");
    ids.push_back(p.id);
    offsets.push_back(data.size());
    data.insert(data.end(), p.value().storage().begin(), p.value().storage().end());
  }
  const std::size_t rows = data.size() / cols;
  return parts[0].tape->record(Mat(rows, cols, std::move(data)), parts,
                               [ids, offsets](Tape& t, std::size_t self) {
                                 const Mat& g = t.grad(self);
                                 for (std::size_t p = 0; p < ids.size(); ++p) {
                                   if (!t.needs_grad(ids[p])) continue;
                                   Mat& gp = t.grad_buffer(ids[p]);
                                   const double* src = g.data() + offsets[p];
                                   for (std::size_t i = 0; i < gp.size(); ++i) gp.data()[i] += src[i];
                                 }
                               });
}

Var embedding(Var table, const std::vector<int>& ids) {
  const Mat& E = table.value();
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  Mat out(ids.size(), E.cols());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= E.rows()) {
      throw std::out_of_range("token id " + std::to_string(ids[t]) + " outside vocabulary of " +
                              std::to_string(E.rows()));
    }
    std::copy(E.row(ids[t]).begin(), E.row(ids[t]).end(), out.row(t).begin());
  }
  return table.tape->record(std::move(out), {table}, [it = table.id, ids](Tape& t, std::size_t self) {
    if (!t.needs_grad(it)) return;
    const Mat& g = t.grad(self);
    Mat& ge = t.grad_buffer(it);
    for (std::size_t r = 0; r < ids.size(); ++r) axpy(1.0, g.row(r), ge.row(ids[r]));
  });
}

Var cumprod_rows(Var a) {
  Mat out = a.value();
  for (std::size_t i = 1; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= out(i - 1, j);
  return a.tape->record(std::move(out), {a}, [ia = a.id](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    // Division-free: ga[r] = out[r-1] * R[r], R[r] = g[r] + a[r+1] R[r+1].
    const Mat& g = t.grad(self);
    const Mat& x = t.value(ia);
    const Mat& y = t.value(self);
    const std::size_t R = x.rows();
    Mat& ga = t.grad_buffer(ia);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double run = 0.0;
      for (std::size_t r = R; r-- > 0;) {
        run = g(r, j) + (r + 1 < R ? x(r + 1, j) * run : 0.0);
        ga(r, j) += (r > 0 ? y(r - 1, j) : 1.0) * run;
      }
    }
  });
}

Var cumsum_rows(Var a) {
  Mat out = a.value();
  for (std::size_t i = 1; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += out(i - 1, j);
  return a.tape->record(std::move(out), {a}, [ia = a.id](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    Mat g = t.grad(self);
    for (std::size_t i = g.rows() - 1; i-- > 0;)
      for (std::size_t j = 0; j < g.cols(); ++j) g(i, j) += g(i + 1, j);
    t.accumulate(ia, g);
  });
}

Var causal_mask(Var a) {
  Mat out = a.value();
  require_shape(out.rows() == out.cols(), "causal_mask: matrix must be square");
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = i + 1; j < out.cols(); ++j) out(i, j) = 0.0;
  return a.tape->record(std::move(out), {a}, [ia = a.id](Tape& t, std::size_t self) {
    Mat g = t.grad(self);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = i + 1; j < g.cols(); ++j) g(i, j) = 0.0;
    t.accumulate(ia, g);
  });
}

// ---------------------------------------------------------------------------

Var rmsnorm(Var x, Var gain, double eps) {
  require_same_tape(x, gain);
  const Mat& xv = x.value();
  require_shape(gain.rows() == 1 && gain.cols() == xv.cols(), "rmsnorm: gain shape");
  const std::size_t N = xv.cols();
  auto inv = std::make_shared<Vec>(xv.rows());
  Mat out(xv.rows(), N);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double ms = dot(xv.row(r), xv.row(r)) / static_cast<double>(N);
    (*inv)[r] = 1.0 / std::sqrt(ms + eps);
    for (std::size_t c = 0; c < N; ++c) out(r, c) = xv(r, c) * (*inv)[r] * gain.value()(0, c);
  }
  return x.tape->record(std::move(out), {x, gain}, [ix = x.id, ig = gain.id, inv, N](Tape& t, std::size_t self) {
    const Mat& g = t.grad(self);
    const Mat& xv = t.value(ix);
    const Mat& gv = t.value(ig);
    if (t.needs_grad(ig)) {
      Mat gg(1, N);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < N; ++c) gg(0, c) += g(r, c) * xv(r, c) * (*inv)[r];
      t.accumulate(ig, gg);
    }
    if (t.needs_grad(ix)) {
      Mat gx(g.rows(), N);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        const double s = (*inv)[r];
        double proj = 0.0;
        for (std::size_t c = 0; c < N; ++c) proj += g(r, c) * gv(0, c) * xv(r, c);
        const double k = proj * s * s * s / static_cast<double>(N);
        for (std::size_t c = 0; c < N; ++c) gx(r, c) = g(r, c) * gv(0, c) * s - xv(r, c) * k;
      }
      t.accumulate(ix, gx);
    }
  });
}

Var causal_conv(Var x, Var w) {
  require_same_tape(x, w);
  const Mat& xv = x.value();
  const Mat& wv = w.value();
  require_shape(wv.cols() == xv.cols(), "causal_conv: weight channels " + wv.shape_str() +
                                             " vs input " + xv.shape_str());
  const std::size_t T = xv.rows(), C = xv.cols(), W = wv.rows();
  Mat out(T, C);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < W && j <= t; ++j)
      for (std::size_t c = 0; c < C; ++c) out(t, c) += wv(j, c) * xv(t - j, c);
  return x.tape->record(std::move(out), {x, w}, [ix = x.id, iw = w.id, T, C, W](Tape& t, std::size_t self) {
    const Mat& g = t.grad(self);
    const Mat& xv = t.value(ix);
    const Mat& wv = t.value(iw);
    if (t.needs_grad(ix)) {
      Mat gx(T, C);
      for (std::size_t s = 0; s < T; ++s)
        for (std::size_t j = 0; j < W && j <= s; ++j)
          for (std::size_t c = 0; c < C; ++c) gx(s - j, c) += wv(j, c) * g(s, c);
      t.accumulate(ix, gx);
    }
    if (t.needs_grad(iw)) {
      Mat gw(W, C);
      for (std::size_t s = 0; s < T; ++s)
        for (std::size_t j = 0; j < W && j <= s; ++j)
          for (std::size_t c = 0; c < C; ++c) gw(j, c) += xv(s - j, c) * g(s, c);
      t.accumulate(iw, gw);
    }
  });
}

Var masked_cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<bool>& mask) {
  const Mat& L = logits.value();
  if (targets.size() != L.rows() || mask.size() != L.rows()) {
    throw ShapeError("masked_cross_entropy: targets/mask length vs logits rows");
  }
  auto probs = std::make_shared<Mat>(L.rows(), L.cols());
  double total = 0.0;
  for (std::size_t r = 0; r < L.rows(); ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= L.cols()) {
      throw std::out_of_range("cross entropy target outside vocabulary");
    }
    const auto row = L.row(r);
    const double peak = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t c = 0; c < L.cols(); ++c) z += ((*probs)(r, c) = std::exp(row[c] - peak));
    for (std::size_t c = 0; c < L.cols(); ++c) (*probs)(r, c) /= z;
    total += std::log(z) + peak - row[targets[r]];
  }
  return logits.tape->record(Mat(1, 1, total), {logits},
                             [il = logits.id, probs, targets, mask](Tape& t, std::size_t self) {
                               const double g = t.grad(self)(0, 0);
                               Mat gl(probs->rows(), probs->cols());
                               for (std::size_t r = 0; r < gl.rows(); ++r) {
                                 if (!mask[r]) continue;
                                 for (std::size_t c = 0; c < gl.cols(); ++c) gl(r, c) = g * (*probs)(r, c);
                                 gl(r, targets[r]) -= g;
                               }
                               t.accumulate(il, gl);
                             });
}

Var causal_softmax_attention(Var q, Var k, Var v) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Mat& Q = q.value();
  const Mat& K = k.value();
  const Mat& V = v.value();
  require_shape(Q.same_shape(K) && V.rows() == Q.rows(), "attention: shape mismatch");
  const std::size_t T = Q.rows();
  auto P = std::make_shared<Mat>(T, T);
  Mat out(T, V.cols());
  for (std::size_t t = 0; t < T; ++t) {
    double peak = -INFINITY;
    for (std::size_t j = 0; j <= t; ++j) peak = std::max(peak, (*P)(t, j) = dot(Q.row(t), K.row(j)));
    double z = 0.0;
    for (std::size_t j = 0; j <= t; ++j) z += ((*P)(t, j) = std::exp((*P)(t, j) - peak));
    for (std::size_t j = 0; j <= t; ++j) {
      (*P)(t, j) /= z;
      axpy((*P)(t, j), V.row(j), out.row(t));
    }
  }
  return q.tape->record(std::move(out), {q, k, v}, [iq = q.id, ik = k.id, iv = v.id, P, T](Tape& t, std::size_t self) {
    const Mat& g = t.grad(self);
    const Mat& Q = t.value(iq);
    const Mat& K = t.value(ik);
    const Mat& V = t.value(iv);
    Mat gq(Q.rows(), Q.cols()), gk(K.rows(), K.cols()), gv(V.rows(), V.cols());
    Vec dp(T);
    for (std::size_t s = 0; s < T; ++s) {
      double mean = 0.0;
      for (std::size_t j = 0; j <= s; ++j) {
        axpy((*P)(s, j), g.row(s), gv.row(j));
        dp[j] = dot(g.row(s), V.row(j));
        mean += (*P)(s, j) * dp[j];
      }
      for (std::size_t j = 0; j <= s; ++j) {
        const double ds = (*P)(s, j) * (dp[j] - mean);
        axpy(ds, K.row(j), gq.row(s));
        axpy(ds, Q.row(s), gk.row(j));
      }
    }
    t.accumulate(iq, gq);
    t.accumulate(ik, gk);
    t.accumulate(iv, gv);
  });
}

// ---------------------------------------------------------------------------

namespace {

struct LatticeStepCache {
  Vec n;      // slot norms
  Mat phi;    // normalized slots
  Vec h;      // driver, R^d
  Vec c;      // intensity, R^m
  Vec hhat;   // s_i . h / n_i^2
  Mat p;      // h - hhat_i s_i
  Mat delta;  // -gamma (c_i / n_i) p_i
  Vec D;      // |delta_i|^2
  Vec beta;
};

void lattice_forward_step(const Mat& S, std::span<const double> k, std::span<const double> v,
                          double gamma, double mu, Mode mode, LatticeStepCache& cc, Mat& next) {
  const std::size_t m = S.rows(), d = S.cols();
  cc.n.resize(m);
  cc.phi = S;
  for (std::size_t i = 0; i < m; ++i) {
    cc.n[i] = norm2(S.row(i));
    if (!(cc.n[i] > kSlotEps)) throw DegenerateStateError("lattice scan: slot norm <= eps");
    for (double& x : cc.phi.row(i)) x /= cc.n[i];
  }
  switch (mode) {
    case Mode::Dec:
      cc.h.assign(d, 0.0);
      for (std::size_t i = 0; i < m; ++i) axpy(k[i], cc.phi.row(i), cc.h);
      for (std::size_t a = 0; a < d; ++a) cc.h[a] -= v[a];
      cc.c.assign(k.begin(), k.end());
      break;
    case Mode::Sim:
      cc.h.resize(d);
      for (std::size_t a = 0; a < d; ++a) cc.h[a] = -v[a];
      cc.c.assign(k.begin(), k.end());
      break;
    case Mode::Enc:
      cc.h.assign(v.begin(), v.end());
      cc.c.resize(m);
      for (std::size_t i = 0; i < m; ++i) cc.c[i] = dot(cc.phi.row(i), v) - k[i];
      break;
  }
  cc.hhat.resize(m);
  cc.D.resize(m);
  cc.beta.resize(m);
  cc.p = Mat(m, d);
  cc.delta = Mat(m, d);
  next = Mat(m, d);
  for (std::size_t i = 0; i < m; ++i) {
    const auto s = S.row(i);
    const double n = cc.n[i];
    cc.hhat[i] = dot(s, cc.h) / (n * n);
    auto p = cc.p.row(i);
    auto dl = cc.delta.row(i);
    const double coef = -gamma * cc.c[i] / n;
    for (std::size_t a = 0; a < d; ++a) {
      p[a] = cc.h[a] - cc.hhat[i] * s[a];
      dl[a] = coef * p[a];
    }
    cc.D[i] = dot(dl, dl);
    const double w = mu * mu * n * n + cc.D[i];
    if (!(w > 0.0)) throw DegenerateStateError("lattice scan: slot collapses to zero");
    cc.beta[i] = n / std::sqrt(w);
    auto out = next.row(i);
    for (std::size_t a = 0; a < d; ++a) out[a] = cc.beta[i] * (mu * s[a] + dl[a]);
  }
}

Vec read_slots(const Mat& S, std::span<const double> q) {
  Vec y(S.cols(), 0.0);
  for (std::size_t i = 0; i < S.rows(); ++i) axpy(q[i], S.row(i), y);
  return y;
}

}  // namespace

Var lattice_sequential(Var K, Var V, Var Q, Var gamma, Var mu, const Mat& S0, Mode mode) {
  for (Var x : {V, Q, gamma, mu}) require_same_tape(K, x);
  const std::size_t T = K.rows(), m = S0.rows(), d = S0.cols();
  require_shape(K.cols() == m && Q.cols() == m && V.cols() == d && Q.rows() == T && V.rows() == T &&
                    gamma.rows() == T && gamma.cols() == 1 && mu.rows() == T && mu.cols() == 1,
                "lattice_sequential: input shapes do not match state " + S0.shape_str());
  Tape& tape = *K.tape;
  auto states = std::make_shared<std::vector<Mat>>();
  states->reserve(T + 1);
  states->push_back(S0);
  Mat Y(T, d);
  LatticeStepCache cc;
  const Mat& Kv = K.value();
  const Mat& Vv = V.value();
  const Mat& Qv = Q.value();
  for (std::size_t t = 0; t < T; ++t) {
    Mat next;
    const double g = gamma.value()(t, 0), u = mu.value()(t, 0);
    if (!(g >= 0.0 && g <= 1.0) || !(u >= 0.0 && u <= 1.0)) {
      throw std::invalid_argument("lattice scan: gates outside [0, 1]");
    }
    lattice_forward_step(states->back(), Kv.row(t), Vv.row(t), g, u, mode, cc, next);
    const Vec y = read_slots(next, Qv.row(t));
    std::copy(y.begin(), y.end(), Y.row(t).begin());
    states->push_back(std::move(next));
  }
  if (!tape.grad_enabled()) states.reset();

  return tape.record(std::move(Y), {K, V, Q, gamma, mu},
                     [iK = K.id, iV = V.id, iQ = Q.id, ig = gamma.id, imu = mu.id, states, mode, T, m, d](
                         Tape& t, std::size_t self) {
    const Mat& Ybar = t.grad(self);
    const Mat& Kv = t.value(iK);
    const Mat& Vv = t.value(iV);
    const Mat& Qv = t.value(iQ);
    Mat gK(T, m), gV(T, d), gQ(T, m), gG(T, 1), gM(T, 1);
    Mat Sbar(m, d);  // adjoint of the state after step t
    Mat prevbar(m, d);
    LatticeStepCache cc;
    Mat scratch;
    Vec hbar(d), cbar(m), nbar(m), dbar(d), ubar(d), gbar(d), pbar(d), phibar(d);
    for (std::size_t step = T; step-- > 0;) {
      const Mat& S = (*states)[step];
      const Mat& Snew = (*states)[step + 1];
      const auto k = Kv.row(step);
      const auto v = Vv.row(step);
      const auto q = Qv.row(step);
      const auto yb = Ybar.row(step);
      const double gamma = t.value(ig)(step, 0), mu = t.value(imu)(step, 0);
      for (std::size_t i = 0; i < m; ++i) {
        gQ(step, i) = dot(Snew.row(i), yb);
        axpy(q[i], yb, Sbar.row(i));
      }
      lattice_forward_step(S, k, v, gamma, mu, mode, cc, scratch);

      std::fill(hbar.begin(), hbar.end(), 0.0);
      double gam_bar = 0.0, mu_bar = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const auto s = S.row(i);
        const auto sb = Sbar.row(i);
        const auto dl = cc.delta.row(i);
        const auto p = cc.p.row(i);
        auto out = prevbar.row(i);
        const double n = cc.n[i], beta = cc.beta[i];
        // s' = beta u, u = mu s + delta
        double beta_bar = 0.0;
        for (std::size_t a = 0; a < d; ++a) {
          beta_bar += sb[a] * (mu * s[a] + dl[a]);
          ubar[a] = beta * sb[a];
        }
        // beta = n w^{-1/2}, w = mu^2 n^2 + D
        const double r = beta / n;  // w^{-1/2}
        const double r3 = r * r * r;
        double n_bar = beta_bar * (r - mu * mu * n * n * r3);
        mu_bar += beta_bar * (-mu * n * n * n * r3);
        const double D_bar = beta_bar * (-0.5 * n * r3);
        for (std::size_t a = 0; a < d; ++a) {
          dbar[a] = ubar[a] + 2.0 * D_bar * dl[a];
          out[a] = mu * ubar[a];
          mu_bar += ubar[a] * s[a];
        }
        // delta = -gamma g, g = (c/n) p
        const double a_i = cc.c[i] / n;
        double abar = 0.0;
        for (std::size_t a = 0; a < d; ++a) {
          gam_bar += -(a_i * p[a]) * dbar[a];
          gbar[a] = -gamma * dbar[a];
          abar += gbar[a] * p[a];
          pbar[a] = a_i * gbar[a];
        }
        // p = h - hhat s
        double hhat_bar = 0.0;
        for (std::size_t a = 0; a < d; ++a) {
          hbar[a] += pbar[a];
          hhat_bar -= pbar[a] * s[a];
          out[a] -= cc.hhat[i] * pbar[a];
        }
        cbar[i] = abar / n;
        n_bar -= abar * a_i / n;
        // hhat = s.h / n^2
        const double inv_nn = 1.0 / (n * n);
        for (std::size_t a = 0; a < d; ++a) {
          out[a] += hhat_bar * cc.h[a] * inv_nn;
          hbar[a] += hhat_bar * s[a] * inv_nn;
        }
        n_bar -= 2.0 * hhat_bar * cc.hhat[i] / n;
        nbar[i] = n_bar;
      }
      gG(step, 0) = gam_bar;
      gM(step, 0) = mu_bar;

      // Mode-specific driver and intensity; phi_bar feeds back into the slots.
      for (std::size_t i = 0; i < m; ++i) {
        auto out = prevbar.row(i);
        const auto s = S.row(i);
        const auto phi = cc.phi.row(i);
        const double n = cc.n[i];
        std::fill(phibar.begin(), phibar.end(), 0.0);
        bool has_phibar = false;
        switch (mode) {
          case Mode::Dec:
            gK(step, i) += cbar[i] + dot(phi, hbar);
            for (std::size_t a = 0; a < d; ++a) phibar[a] = k[i] * hbar[a];
            has_phibar = true;
            break;
          case Mode::Sim:
            gK(step, i) += cbar[i];
            break;
          case Mode::Enc:
            axpy(cbar[i], phi, gV.row(step));
            for (std::size_t a = 0; a < d; ++a) phibar[a] = cbar[i] * v[a];
            gK(step, i) -= cbar[i];
            has_phibar = true;
            break;
        }
        double n_bar = nbar[i];
        if (has_phibar) {
          n_bar -= dot(phibar, s) / (n * n);
          axpy(1.0 / n, phibar, out);
        }
        axpy(n_bar / n, s, out);
      }
      switch (mode) {
        case Mode::Dec:
        case Mode::Sim:
          axpy(-1.0, hbar, gV.row(step));
          break;
        case Mode::Enc:
          axpy(1.0, hbar, gV.row(step));
          break;
      }
      std::swap(Sbar, prevbar);
    }
    t.accumulate(iK, gK);
    t.accumulate(iV, gV);
    t.accumulate(iQ, gQ);
    t.accumulate(ig, gG);
    t.accumulate(imu, gM);
  });
}

Var delta_family(Var K, Var V, Var Q, std::optional<Var> alpha, std::optional<Var> gamma,
                 const Mat& S0, DeltaFamilyOptions opts) {
  require_same_tape(K, V);
  require_same_tape(K, Q);
  const std::size_t T = K.rows(), m = S0.rows(), d = S0.cols();
  require_shape(K.cols() == m && Q.cols() == m && V.cols() == d && Q.rows() == T && V.rows() == T,
                "delta_family: input shapes do not match state " + S0.shape_str());
  if (alpha) {
    require_same_tape(K, *alpha);
    require_shape(alpha->rows() == T && alpha->cols() == m, "delta_family: alpha must be T x m");
  }
  if (opts.delta) {
    if (!gamma) throw std::invalid_argument("delta_family: delta rule needs gamma");
    require_same_tape(K, *gamma);
    require_shape(gamma->rows() == T && gamma->cols() == 1, "delta_family: gamma must be T x 1");
  }
  const Mat& Kv = K.value();
  const Mat& Vv = V.value();
  const Mat& Qv = Q.value();
  const Mat* Av = alpha ? &alpha->value() : nullptr;
  const Mat* Gv = opts.delta ? &gamma->value() : nullptr;

  auto states = std::make_shared<std::vector<Mat>>();
  states->reserve(T + 1);
  states->push_back(S0);
  Mat Y(T, d);
  Vec r(d);
  for (std::size_t t = 0; t < T; ++t) {
    const Mat& S = states->back();
    Mat B = S;
    if (Av)
      for (std::size_t i = 0; i < m; ++i)
        for (double& x : B.row(i)) x *= (*Av)(t, i);
    const auto k = Kv.row(t);
    if (opts.delta) {
      const Mat& R = opts.decay_inside ? B : S;
      std::fill(r.begin(), r.end(), 0.0);
      for (std::size_t i = 0; i < m; ++i) axpy(k[i], R.row(i), r);
      for (std::size_t a = 0; a < d; ++a) r[a] -= Vv(t, a);
      for (std::size_t i = 0; i < m; ++i) axpy(-(*Gv)(t, 0) * k[i], r, B.row(i));
    } else {
      for (std::size_t i = 0; i < m; ++i) axpy(k[i], Vv.row(t), B.row(i));
    }
    const Vec y = read_slots(B, Qv.row(t));
    std::copy(y.begin(), y.end(), Y.row(t).begin());
    states->push_back(std::move(B));
  }

  std::vector<Var> inputs{K, V, Q};
  if (alpha) inputs.push_back(*alpha);
  if (opts.delta) inputs.push_back(*gamma);
  const std::size_t ia = alpha ? alpha->id : 0, ig = opts.delta ? gamma->id : 0;
  const bool has_alpha = alpha.has_value();
  return K.tape->record(std::move(Y), inputs,
                        [iK = K.id, iV = V.id, iQ = Q.id, ia, ig, has_alpha, opts, states, T, m, d](
                            Tape& t, std::size_t self) {
    const Mat& Ybar = t.grad(self);
    const Mat& Kv = t.value(iK);
    const Mat& Vv = t.value(iV);
    const Mat& Qv = t.value(iQ);
    Mat gK(T, m), gV(T, d), gQ(T, m), gA(T, m), gG(T, 1);
    Mat Sbar(m, d);  // adjoint of the post-step state
    Mat Bbar(m, d), prevbar(m, d);
    Vec r(d), rbar(d);
    for (std::size_t step = T; step-- > 0;) {
      const Mat& S = (*states)[step];
      const Mat& Snew = (*states)[step + 1];
      const auto k = Kv.row(step);
      const auto yb = Ybar.row(step);
      for (std::size_t i = 0; i < m; ++i) {
        gQ(step, i) = dot(Snew.row(i), yb);
        axpy(Qv(step, i), yb, Sbar.row(i));
      }
      auto alpha_at = [&](std::size_t i) { return has_alpha ? t.value(ia)(step, i) : 1.0; };
      Bbar = Sbar;  // S' = B + write term
      prevbar.fill(0.0);
      if (opts.delta) {
        const double gamma = t.value(ig)(step, 0);
        // recompute r = R k - v
        std::fill(r.begin(), r.end(), 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          const double scale = opts.decay_inside ? alpha_at(i) : 1.0;
          axpy(k[i] * scale, S.row(i), r);
        }
        for (std::size_t a = 0; a < d; ++a) r[a] -= Vv(step, a);
        std::fill(rbar.begin(), rbar.end(), 0.0);
        double gbar = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double sr = dot(Sbar.row(i), r);
          gbar -= k[i] * sr;
          gK(step, i) -= gamma * sr;
          axpy(-gamma * k[i], Sbar.row(i), rbar);
        }
        gG(step, 0) = gbar;
        axpy(-1.0, rbar, gV.row(step));
        // r = sum_i k_i R_i - v
        for (std::size_t i = 0; i < m; ++i) {
          const double scale = opts.decay_inside ? alpha_at(i) : 1.0;
          gK(step, i) += scale * dot(S.row(i), rbar);
          if (opts.decay_inside) {
            axpy(k[i], rbar, Bbar.row(i));
          } else {
            axpy(k[i], rbar, prevbar.row(i));
          }
        }
      } else {
        for (std::size_t i = 0; i < m; ++i) {
          gK(step, i) += dot(Sbar.row(i), Vv.row(step));
          axpy(k[i], Sbar.row(i), gV.row(step));
        }
      }
      // B = diag(alpha) S
      for (std::size_t i = 0; i < m; ++i) {
        const double al = alpha_at(i);
        if (has_alpha) gA(step, i) = dot(Bbar.row(i), S.row(i));
        axpy(al, Bbar.row(i), prevbar.row(i));
      }
      std::swap(Sbar, prevbar);
    }
    t.accumulate(iK, gK);
    t.accumulate(iV, gV);
    t.accumulate(iQ, gQ);
    if (has_alpha) t.accumulate(ia, gA);
    if (opts.delta) t.accumulate(ig, gG);
  });
}

Var gla_chunk(Var Q, Var K, Var V, Var G, Var S0) {
  for (Var x : {K, V, G, S0}) require_same_tape(Q, x);
  const GlaResult fwd = gla_intra_chunk(Q.value(), K.value(), V.value(), G.value(), S0.value());
  const std::size_t C = Q.rows(), m = Q.cols(), d = V.cols();
  Mat out(m + C, d);
  std::copy(fwd.state.storage().begin(), fwd.state.storage().end(), out.data());
  std::copy(fwd.Y.storage().begin(), fwd.Y.storage().end(), out.data() + m * d);
  return Q.tape->record(std::move(out), {Q, K, V, G, S0},
                        [iQ = Q.id, iK = K.id, iV = V.id, iG = G.id, iS = S0.id, C, m, d](Tape& t, std::size_t self) {
    const Mat& g = t.grad(self);
    const Mat& Qv = t.value(iQ);
    const Mat& Kv = t.value(iK);
    const Mat& Vv = t.value(iV);
    const Mat& Gv = t.value(iG);
    // Token-loop replay of the states.
    std::vector<Mat> states{t.value(iS)};
    for (std::size_t s = 0; s < C; ++s) {
      Mat next = states.back();
      for (std::size_t n = 0; n < m; ++n) {
        auto row = next.row(n);
        for (double& x : row) x *= Gv(s, n);
        axpy(Kv(s, n), Vv.row(s), row);
      }
      states.push_back(std::move(next));
    }
    Mat Sbar(m, d, std::vector<double>(g.data(), g.data() + m * d));
    Mat gQ(C, m), gK(C, m), gV(C, d), gG(C, m);
    for (std::size_t s = C; s-- > 0;) {
      const auto yb = g.row(m + s);
      const Mat& cur = states[s + 1];
      const Mat& prev = states[s];
      for (std::size_t n = 0; n < m; ++n) {
        gQ(s, n) = dot(cur.row(n), yb);
        auto sb = Sbar.row(n);
        axpy(Qv(s, n), yb, sb);
        gG(s, n) = dot(sb, prev.row(n));
        gK(s, n) = dot(sb, Vv.row(s));
        axpy(Kv(s, n), sb, gV.row(s));
        for (double& x : sb) x *= Gv(s, n);
      }
    }
    t.accumulate(iQ, gQ);
    t.accumulate(iK, gK);
    t.accumulate(iV, gV);
    t.accumulate(iG, gG);
    t.accumulate(iS, Sbar);
  });
}

}  // namespace lattice::ad
