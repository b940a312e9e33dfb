// SPDX-License-Identifier: Apache-2.0

#include "cpa/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cpa/error.hpp"

namespace cpa::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap as_mat(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

Shape mat_shape(std::size_t rows, std::size_t cols) { return Shape{rows, cols}; }

void require(bool ok, const std::string& message) {
  if (!ok) throw ValidationError(message);
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("non-finite value in leaf tensor");
  Node node;
  node.op = "leaf";
  node.owned = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::external(const Tensor& value, bool requires_grad) {
  Node node;
  node.op = "external";
  node.external = &value;
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& node = nodes_[id];
  return node.external ? *node.external : node.owned;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor::zeros_like(value(id));
  return node.grad;
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(op, std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> parents, BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericError("non-finite value produced by " + std::string(op));
  }
  Node node;
  node.op = op;
  node.owned = std::move(value);
  for (const Var& p : parents) {
    if (p.tape_ != this) throw ValidationError(std::string(op) + ": operand from a different tape");
    node.requires_grad = node.requires_grad || nodes_[p.id_].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw ValidationError("backward: loss belongs to a different tape");
  if (value(loss.id_).size() != 1) {
    throw ValidationError("backward: loss must be scalar, got shape " + shape_string(value(loss.id_).shape()));
  }
  for (Node& node : nodes_) node.grad = Tensor();
  if (!nodes_[loss.id_].requires_grad) return;
  grad_buffer(loss.id_).fill(1.0);
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || node.grad.empty()) continue;
    if (!node.grad.all_finite()) {
      throw NumericError("non-finite gradient reaching " + std::string(node.op));
    }
    // The closure may allocate parent grads but never appends nodes, so the
    // reference stays valid.
    node.backward(*this, node.grad);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_[v.id_];
  if (node.grad.empty()) return Tensor::zeros_like(value(v.id_));
  return node.grad;
}

bool Tape::has_grad(Var v) const { return !nodes_[v.id_].grad.empty(); }

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.cols() == bv.rows(), "matmul: inner dimensions differ " + shape_string(av.shape()) + " . " +
                                      shape_string(bv.shape()));
  Tensor out(mat_shape(av.rows(), bv.cols()));
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) as_mat(t.grad_buffer(ia)).noalias() += as_mat(g) * as_mat(t.value(ib)).transpose();
    if (t.requires_grad(ib)) as_mat(t.grad_buffer(ib)).noalias() += as_mat(t.value(ia)).transpose() * as_mat(g);
  });
}

Var matmul_nt(Var a, Var w) {
  const Tensor& av = a.value();
  const Tensor& wv = w.value();
  require(av.cols() == wv.cols(), "matmul_nt: inner dimensions differ " + shape_string(av.shape()) + " . " +
                                      shape_string(wv.shape()) + "^T");
  Tensor out(mat_shape(av.rows(), wv.rows()));
  as_mat(out).noalias() = as_mat(av) * as_mat(wv).transpose();
  const std::size_t ia = a.id(), iw = w.id();
  return a.tape().record("matmul_nt", std::move(out), {a, w}, [ia, iw](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) as_mat(t.grad_buffer(ia)).noalias() += as_mat(g) * as_mat(t.value(iw));
    if (t.requires_grad(iw)) as_mat(t.grad_buffer(iw)).noalias() += as_mat(g).transpose() * as_mat(t.value(ia));
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value() + b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g;
    if (t.requires_grad(ib)) t.grad_buffer(ib) += g;
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value() - b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("sub", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g;
    if (t.requires_grad(ib)) t.grad_buffer(ib) -= g;
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("mul", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      const Tensor& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      const Tensor& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value() * s;
  const std::size_t ia = a.id();
  return a.tape().record("scale", std::move(out), {a}, [ia, s](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_row(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  require(rv.size() == av.cols(), "add_row: row width " + std::to_string(rv.size()) + " vs " +
                                      std::to_string(av.cols()) + " columns");
  Tensor out = av;
  const std::size_t n = av.rows(), m = av.cols();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += rv[c];
  }
  const std::size_t ia = a.id(), ir = row.id();
  return a.tape().record("add_row", std::move(out), {a, row}, [ia, ir, n, m](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g;
    if (t.requires_grad(ir)) {
      Tensor& gr = t.grad_buffer(ir);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < m; ++c) gr[c] += g[r * m + c];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  double total = 0.0;
  for (double x : a.value().data()) total += x;
  const std::size_t ia = a.id();
  return a.tape().record("sum", Tensor::scalar(total), {a}, [ia](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    const double s = g[0];
    for (double& x : ga.data()) x += s;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var frobenius_norm(Var a) {
  const double norm = l2_norm(a.value().data());
  const std::size_t ia = a.id();
  return a.tape().record("frobenius_norm", Tensor::scalar(norm), {a}, [ia, norm](Tape& t, const Tensor& g) {
    // The norm is not differentiable at 0; use the zero subgradient there.
    if (norm == 0.0) return;
    Tensor& ga = t.grad_buffer(ia);
    const Tensor& av = t.value(ia);
    const double s = g[0] / norm;
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += s * av[i];
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

Var gelu(Var a) {
  Tensor out = a.value();
  for (double& x : out.data()) x = gelu_value(x);
  const std::size_t ia = a.id();
  return a.tape().record("gelu", std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    const Tensor& av = t.value(ia);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double x = av[i];
      const double inner = kGeluC * (x + 0.044715 * x * x * x);
      const double th = std::tanh(inner);
      const double dinner = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
      ga[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  require(gain.value().size() == d && bias.value().size() == d, "layer_norm: gain/bias width mismatch");
  Tensor out(xv.shape());
  Tensor normed(xv.shape());
  std::vector<double> inv_std(n);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = xv.row_span(r);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (row[c] - mu) * is;
      normed[r * d + c] = xh;
      out[r * d + c] = xh * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      "layer_norm", std::move(out), {x, gain, bias},
      [ix, ig, ib, n, d, normed = std::move(normed), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(ig);
        if (t.requires_grad(ig)) {
          Tensor& gg = t.grad_buffer(ig);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * normed[r * d + c];
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad_buffer(ib);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
        }
        if (t.requires_grad(ix)) {
          Tensor& gx = t.grad_buffer(ix);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dxh = g[r * d + c] * gv[c];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * normed[r * d + c];
            }
            mean_dxh *= inv_d;
            mean_dxh_xh *= inv_d;
            for (std::size_t c = 0; c < d; ++c) {
              const double dxh = g[r * d + c] * gv[c];
              gx[r * d + c] += inv_std[r] * (dxh - mean_dxh - normed[r * d + c] * mean_dxh_xh);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing

Var embedding(Var table, std::span<const std::size_t> ids) {
  const Tensor& tv = table.value();
  const std::size_t d = tv.cols();
  Tensor out(mat_shape(ids.size(), d));
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] < tv.rows(), "embedding: token id " + std::to_string(ids[r]) + " out of range");
    const auto src = tv.row_span(ids[r]);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  const std::size_t it = table.id();
  std::vector<std::size_t> saved(ids.begin(), ids.end());
  return table.tape().record("embedding", std::move(out), {table},
                             [it, d, saved = std::move(saved)](Tape& t, const Tensor& g) {
                               Tensor& gt = t.grad_buffer(it);
                               for (std::size_t r = 0; r < saved.size(); ++r)
                                 for (std::size_t c = 0; c < d; ++c) gt[saved[r] * d + c] += g[r * d + c];
                             });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& av = a.value();
  const std::size_t d = av.cols();
  Tensor out(mat_shape(rows.size(), d));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < av.rows(), "gather_rows: row " + std::to_string(rows[r]) + " out of range");
    const auto src = av.row_span(rows[r]);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return a.tape().record("gather_rows", std::move(out), {a}, [ia, d, saved = std::move(saved)](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < saved.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) ga[saved[r] * d + c] += g[r * d + c];
  });
}

Var replace_rows(Var a, std::span<const std::size_t> rows, std::span<const Var> values) {
  require(rows.size() == values.size(), "replace_rows: rows/values count mismatch");
  const Tensor& av = a.value();
  const std::size_t d = av.cols();
  Tensor out = av;
  std::vector<bool> replaced(av.rows(), false);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < av.rows(), "replace_rows: row " + std::to_string(rows[i]) + " out of range");
    const Tensor& vv = values[i].value();
    require(vv.size() == d, "replace_rows: value width " + std::to_string(vv.size()) + " vs " + std::to_string(d));
    std::copy(vv.data().begin(), vv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * d));
    replaced[rows[i]] = true;
  }
  std::vector<Var> parents{a};
  parents.insert(parents.end(), values.begin(), values.end());
  std::vector<std::size_t> value_ids;
  for (const Var& v : values) value_ids.push_back(v.id());
  std::vector<std::size_t> saved_rows(rows.begin(), rows.end());
  const std::size_t ia = a.id();
  return a.tape().record(
      "replace_rows", std::move(out), parents,
      [ia, d, replaced = std::move(replaced), saved_rows = std::move(saved_rows),
       value_ids = std::move(value_ids)](Tape& t, const Tensor& g) {
        if (t.requires_grad(ia)) {
          Tensor& ga = t.grad_buffer(ia);
          for (std::size_t r = 0; r < replaced.size(); ++r) {
            if (replaced[r]) continue;
            for (std::size_t c = 0; c < d; ++c) ga[r * d + c] += g[r * d + c];
          }
        }
        // When a row is replaced twice, the later value wins.
        for (std::size_t i = 0; i < value_ids.size(); ++i) {
          bool shadowed = false;
          for (std::size_t j = i + 1; j < saved_rows.size(); ++j) shadowed = shadowed || saved_rows[j] == saved_rows[i];
          if (shadowed || !t.requires_grad(value_ids[i])) continue;
          Tensor& gv = t.grad_buffer(value_ids[i]);
          for (std::size_t c = 0; c < d; ++c) gv[c] += g[saved_rows[i] * d + c];
        }
      });
}

// ---------------------------------------------------------------------------
// Attention

Var causal_self_attention(Var qkv, std::size_t n_heads, std::span<const Segment> segments) {
  const Tensor& in = qkv.value();
  require(in.cols() % 3 == 0, "causal_self_attention: qkv width must be 3d");
  const std::size_t d = in.cols() / 3;
  require(n_heads > 0 && d % n_heads == 0, "causal_self_attention: d not divisible by heads");
  const std::size_t hd = d / n_heads;
  const std::size_t width = in.cols();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::size_t covered = 0;
  for (const Segment& s : segments) {
    require(s.offset == covered && s.length > 0, "causal_self_attention: segments must tile the rows");
    covered += s.length;
  }
  require(covered == in.rows(), "causal_self_attention: segments cover " + std::to_string(covered) + " of " +
                                    std::to_string(in.rows()) + " rows");

  // probs[seg][head] is a lower-triangular len x len block stored densely.
  std::vector<std::vector<double>> probs;
  probs.reserve(segments.size() * n_heads);
  Tensor out(mat_shape(in.rows(), d));
  for (const Segment& s : segments) {
    const std::size_t len = s.length;
    for (std::size_t h = 0; h < n_heads; ++h) {
      std::vector<double> p(len * len, 0.0);
      for (std::size_t i = 0; i < len; ++i) {
        const double* q = (in.data().data() + ((s.offset + i) * width + h * hd));
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* k = (in.data().data() + ((s.offset + j) * width + d + h * hd));
          double acc = 0.0;
          for (std::size_t c = 0; c < hd; ++c) acc += q[c] * k[c];
          p[i * len + j] = acc * inv_scale;
          mx = std::max(mx, p[i * len + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          p[i * len + j] = std::exp(p[i * len + j] - mx);
          z += p[i * len + j];
        }
        double* o = (out.data().data() + ((s.offset + i) * d + h * hd));
        for (std::size_t j = 0; j <= i; ++j) {
          p[i * len + j] /= z;
          const double* v = (in.data().data() + ((s.offset + j) * width + 2 * d + h * hd));
          for (std::size_t c = 0; c < hd; ++c) o[c] += p[i * len + j] * v[c];
        }
      }
      probs.push_back(std::move(p));
    }
  }

  const std::size_t iq = qkv.id();
  std::vector<Segment> segs(segments.begin(), segments.end());
  return qkv.tape().record(
      "causal_self_attention", std::move(out), {qkv},
      [iq, d, hd, n_heads, width, inv_scale, segs = std::move(segs), probs = std::move(probs)](Tape& t,
                                                                                                const Tensor& g) {
        const Tensor& in = t.value(iq);
        Tensor& gin = t.grad_buffer(iq);
        std::size_t block = 0;
        std::vector<double> dp;
        for (const Segment& s : segs) {
          const std::size_t len = s.length;
          for (std::size_t h = 0; h < n_heads; ++h, ++block) {
            const std::vector<double>& p = probs[block];
            dp.assign(len * len, 0.0);
            for (std::size_t i = 0; i < len; ++i) {
              const double* go = (g.data().data() + ((s.offset + i) * d + h * hd));
              for (std::size_t j = 0; j <= i; ++j) {
                const double* v = (in.data().data() + ((s.offset + j) * width + 2 * d + h * hd));
                double* gv = (gin.data().data() + ((s.offset + j) * width + 2 * d + h * hd));
                double acc = 0.0;
                for (std::size_t c = 0; c < hd; ++c) {
                  acc += go[c] * v[c];
                  gv[c] += p[i * len + j] * go[c];
                }
                dp[i * len + j] = acc;
              }
            }
            for (std::size_t i = 0; i < len; ++i) {
              double row_dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) row_dot += dp[i * len + j] * p[i * len + j];
              const double* q = (in.data().data() + ((s.offset + i) * width + h * hd));
              double* gq = (gin.data().data() + ((s.offset + i) * width + h * hd));
              for (std::size_t j = 0; j <= i; ++j) {
                const double ds = p[i * len + j] * (dp[i * len + j] - row_dot) * inv_scale;
                if (ds == 0.0) continue;
                const double* k = (in.data().data() + ((s.offset + j) * width + d + h * hd));
                double* gk = (gin.data().data() + ((s.offset + j) * width + d + h * hd));
                for (std::size_t c = 0; c < hd; ++c) {
                  gq[c] += ds * k[c];
                  gk[c] += ds * q[c];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

Tensor log_softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  const std::size_t n = logits.rows(), m = logits.cols();
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m; ++c) mx = std::max(mx, logits[r * m + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < m; ++c) z += std::exp(logits[r * m + c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] = logits[r * m + c] - lz;
  }
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor out = log_softmax_rows(logits);
  for (double& x : out.data()) x = std::exp(x);
  return out;
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
  const Tensor& lv = logits.value();
  const std::size_t n = lv.rows(), m = lv.cols();
  require(targets.size() == n, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                   std::to_string(n) + " rows");
  Tensor logp = log_softmax_rows(lv);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    require(targets[r] < m, "cross_entropy: target " + std::to_string(targets[r]) + " out of range for " +
                                std::to_string(m) + " classes");
    loss -= logp[r * m + targets[r]];
  }
  loss /= static_cast<double>(n);
  const std::size_t il = logits.id();
  std::vector<std::size_t> saved(targets.begin(), targets.end());
  return logits.tape().record("cross_entropy", Tensor::scalar(loss), {logits},
                              [il, n, m, logp = std::move(logp), saved = std::move(saved)](Tape& t, const Tensor& g) {
                                Tensor& gl = t.grad_buffer(il);
                                const double s = g[0] / static_cast<double>(n);
                                for (std::size_t r = 0; r < n; ++r) {
                                  for (std::size_t c = 0; c < m; ++c) gl[r * m + c] += s * std::exp(logp[r * m + c]);
                                  gl[r * m + saved[r]] -= s;
                                }
                              });
}

Var kl_divergence(Var p_logits, Var q_logits) {
  const Tensor& pv = p_logits.value();
  const Tensor& qv = q_logits.value();
  require_same_shape(pv, qv, "kl_divergence");
  const std::size_t n = pv.rows(), m = pv.cols();
  Tensor logp = log_softmax_rows(pv);
  Tensor logq = log_softmax_rows(qv);
  std::vector<double> row_kl(n, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      const double lp = logp[r * m + c];
      acc += std::exp(lp) * (lp - logq[r * m + c]);
    }
    // Round-off can leave a tiny negative value for identical rows.
    row_kl[r] = std::max(acc, 0.0);
    total += row_kl[r];
  }
  total /= static_cast<double>(n);
  const std::size_t ip = p_logits.id(), iq = q_logits.id();
  return p_logits.tape().record(
      "kl_divergence", Tensor::scalar(total), {p_logits, q_logits},
      [ip, iq, n, m, logp = std::move(logp), logq = std::move(logq), row_kl = std::move(row_kl)](Tape& t,
                                                                                                 const Tensor& g) {
        const double s = g[0] / static_cast<double>(n);
        if (t.requires_grad(ip)) {
          Tensor& gp = t.grad_buffer(ip);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < m; ++c) {
              const double lp = logp[r * m + c];
              gp[r * m + c] += s * std::exp(lp) * (lp - logq[r * m + c] - row_kl[r]);
            }
        }
        if (t.requires_grad(iq)) {
          Tensor& gq = t.grad_buffer(iq);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < m; ++c)
              gq[r * m + c] += s * (std::exp(logq[r * m + c]) - std::exp(logp[r * m + c]));
        }
      });
}

}  // namespace cpa::ad
