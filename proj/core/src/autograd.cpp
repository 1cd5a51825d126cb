#include "merlin/autograd.hpp"

#include "merlin/error.hpp"

#include <cmath>
#include <memory>
#include <string>

namespace merlin::ag {

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, nullptr, {}});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, grad_enabled_, true, nullptr, {}});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::parameter(Parameter& p) {
  const bool rg = grad_enabled_ && p.trainable;
  // The value is copied so that later optimizer steps cannot alias a live tape.
  nodes_.push_back(Node{p.value, {}, rg, false, rg ? &p : nullptr, {}});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::push(Matrix value, bool requires_grad, std::function<void(const Matrix&)> back) {
  const bool rg = grad_enabled_ && requires_grad;
  nodes_.push_back(Node{std::move(value), {}, rg, false, nullptr, rg ? std::move(back) : nullptr});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::accumulate(int id, const Matrix& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw InvalidInput("backward: variable belongs to another tape");
  Node& r = nodes_[static_cast<std::size_t>(root.id)];
  if (r.value.size() != 1) throw ShapeError("backward: root must be a scalar");
  if (!r.requires_grad) return;
  r.grad = Matrix::Ones(1, 1);
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.back) n.back(n.grad);
    if (n.param != nullptr) {
      if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols())
        n.param->grad = Matrix::Zero(n.value.rows(), n.value.cols());
      n.param->grad += n.grad;
    }
    if (!n.keep_grad && n.param == nullptr && i != root.id) n.grad.resize(0, 0);
  }
}

namespace {

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw InvalidInput("operands recorded on different tapes");
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Tape* t = a.tape;
  const int ia = a.id, ib = b.id;
  const bool ra = t->requires_grad(a), rb = t->requires_grad(b);
  Matrix out = a.value() * b.value();
  return t->push(std::move(out), ra || rb, [t, ia, ib, ra, rb](const Matrix& g) {
    if (ra) t->accumulate(ia, g * t->value(Var{t, ib}).transpose());
    if (rb) t->accumulate(ib, t->value(Var{t, ia}).transpose() * g);
  });
}

Var linear(Var x, Var w) {
  require_same_tape(x, w);
  if (x.cols() != w.cols())
    throw ShapeError("linear: input width " + std::to_string(x.cols()) + " != weight in-features " +
                     std::to_string(w.cols()));
  Tape* t = x.tape;
  const int ix = x.id, iw = w.id;
  const bool rx = t->requires_grad(x), rw = t->requires_grad(w);
  Matrix out = x.value() * w.value().transpose();
  return t->push(std::move(out), rx || rw, [t, ix, iw, rx, rw](const Matrix& g) {
    if (rx) t->accumulate(ix, g * t->value(Var{t, iw}));
    if (rw) t->accumulate(iw, g.transpose() * t->value(Var{t, ix}));
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "add");
  Tape* t = a.tape;
  const int ia = a.id, ib = b.id;
  return t->push(a.value() + b.value(), t->requires_grad(a) || t->requires_grad(b),
                 [t, ia, ib](const Matrix& g) {
                   t->accumulate(ia, g);
                   t->accumulate(ib, g);
                 });
}

Var add_row(Var x, Var row) {
  require_same_tape(x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) throw ShapeError("add_row: bias shape mismatch");
  Tape* t = x.tape;
  const int ix = x.id, ir = row.id;
  Matrix out = x.value().rowwise() + row.value().row(0);
  return t->push(std::move(out), t->requires_grad(x) || t->requires_grad(row),
                 [t, ix, ir](const Matrix& g) {
                   t->accumulate(ix, g);
                   t->accumulate(ir, g.colwise().sum());
                 });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "sub");
  Tape* t = a.tape;
  const int ia = a.id, ib = b.id;
  return t->push(a.value() - b.value(), t->requires_grad(a) || t->requires_grad(b),
                 [t, ia, ib](const Matrix& g) {
                   t->accumulate(ia, g);
                   t->accumulate(ib, -g);
                 });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "mul");
  Tape* t = a.tape;
  const int ia = a.id, ib = b.id;
  Matrix out = a.value().cwiseProduct(b.value());
  return t->push(std::move(out), t->requires_grad(a) || t->requires_grad(b),
                 [t, ia, ib](const Matrix& g) {
                   t->accumulate(ia, g.cwiseProduct(t->value(Var{t, ib})));
                   t->accumulate(ib, g.cwiseProduct(t->value(Var{t, ia})));
                 });
}

Var div(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "div");
  Tape* t = a.tape;
  const int ia = a.id, ib = b.id;
  Matrix out = a.value().cwiseQuotient(b.value());
  return t->push(std::move(out), t->requires_grad(a) || t->requires_grad(b),
                 [t, ia, ib](const Matrix& g) {
                   const Matrix& av = t->value(Var{t, ia});
                   const Matrix& bv = t->value(Var{t, ib});
                   t->accumulate(ia, g.cwiseQuotient(bv));
                   t->accumulate(ib, -g.cwiseProduct(av).cwiseQuotient(bv.cwiseProduct(bv)));
                 });
}

Var scale(Var a, double s) {
  Tape* t = a.tape;
  const int ia = a.id;
  return t->push(a.value() * s, t->requires_grad(a),
                 [t, ia, s](const Matrix& g) { t->accumulate(ia, g * s); });
}

double gelu_scalar(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

Var gelu(Var a) {
  Tape* t = a.tape;
  const int ia = a.id;
  Matrix out = a.value().unaryExpr([](double x) { return gelu_scalar(x); });
  return t->push(std::move(out), t->requires_grad(a), [t, ia](const Matrix& g) {
    constexpr double c = 0.7978845608028654;
    const Matrix& x = t->value(Var{t, ia});
    Matrix d = x.unaryExpr([](double v) {
      const double u = c * (v + 0.044715 * v * v * v);
      const double th = std::tanh(u);
      return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * v * v);
    });
    t->accumulate(ia, g.cwiseProduct(d));
  });
}

Var sum(Var a) {
  Tape* t = a.tape;
  const int ia = a.id;
  const Index r = a.rows(), c = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t->push(std::move(out), t->requires_grad(a), [t, ia, r, c](const Matrix& g) {
    t->accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), n > 0 ? 1.0 / n : 0.0);
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInput("concat_rows: no parts");
  Tape* t = parts.front().tape;
  const Index cols = parts.front().cols();
  Index rows = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<Index> offsets;
  for (const Var& p : parts) {
    if (p.tape != t) throw InvalidInput("concat_rows: operands on different tapes");
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    offsets.push_back(rows);
    ids.push_back(p.id);
    rows += p.rows();
    rg = rg || t->requires_grad(p);
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i)
    if (parts[i].rows() > 0) out.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
  return t->push(std::move(out), rg, [t, ids, offsets](const Matrix& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const Index n = t->value(Var{t, ids[i]}).rows();
      if (n > 0 && t->requires_grad(Var{t, ids[i]})) t->accumulate(ids[i], g.middleRows(offsets[i], n));
    }
  });
}

Var slice_rows(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  Tape* t = a.tape;
  const int ia = a.id;
  const Index r = a.rows(), c = a.cols();
  return t->push(a.value().middleRows(start, count), t->requires_grad(a),
                 [t, ia, r, c, start, count](const Matrix& g) {
                   Matrix full = Matrix::Zero(r, c);
                   full.middleRows(start, count) = g;
                   t->accumulate(ia, full);
                 });
}

Var rms_norm(Var x, Var gain, double eps) {
  require_same_tape(x, gain);
  if (gain.rows() != 1 || gain.cols() != x.cols()) throw ShapeError("rms_norm: gain shape mismatch");
  Tape* t = x.tape;
  const int ix = x.id, ig = gain.id;
  const Index n = x.rows(), d = x.cols();
  Eigen::VectorXd inv(n);
  Matrix out(n, d);
  for (Index i = 0; i < n; ++i) {
    const double ms = x.value().row(i).squaredNorm() / static_cast<double>(d);
    inv(i) = 1.0 / std::sqrt(ms + eps);
    out.row(i) = x.value().row(i).cwiseProduct(gain.value().row(0)) * inv(i);
  }
  const bool rg = t->requires_grad(x) || t->requires_grad(gain);
  return t->push(std::move(out), rg, [t, ix, ig, inv, n, d](const Matrix& g) {
    const Matrix& xv = t->value(Var{t, ix});
    const Matrix& gv = t->value(Var{t, ig});
    if (t->requires_grad(Var{t, ix})) {
      Matrix dx(n, d);
      for (Index i = 0; i < n; ++i) {
        const Eigen::RowVectorXd gy = g.row(i).cwiseProduct(gv.row(0));
        const double dot = gy.dot(xv.row(i));
        const double r = inv(i);
        dx.row(i) = gy * r - xv.row(i) * (r * r * r * dot / static_cast<double>(d));
      }
      t->accumulate(ix, dx);
    }
    if (t->requires_grad(Var{t, ig})) {
      Matrix dg = Matrix::Zero(1, d);
      for (Index i = 0; i < n; ++i) dg.row(0) += g.row(i).cwiseProduct(xv.row(i)) * inv(i);
      t->accumulate(ig, dg);
    }
  });
}

namespace {

struct RopeTable {
  Matrix cos, sin;  // (positions, half head dim)
};

RopeTable rope_table(Index n, Index head_dim, double base) {
  const Index half = head_dim / 2;
  RopeTable tab{Matrix(n, half), Matrix(n, half)};
  for (Index p = 0; p < n; ++p)
    for (Index j = 0; j < half; ++j) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
      const double ang = static_cast<double>(p) * freq;
      tab.cos(p, j) = std::cos(ang);
      tab.sin(p, j) = std::sin(ang);
    }
  return tab;
}

Matrix rotate(const Matrix& x, const RopeTable& tab, int n_heads, double dir) {
  const Index n = x.rows(), d = x.cols(), hd = d / n_heads, half = hd / 2;
  Matrix out(n, d);
  for (Index p = 0; p < n; ++p)
    for (int h = 0; h < n_heads; ++h)
      for (Index j = 0; j < half; ++j) {
        const Index c0 = h * hd + 2 * j;
        const double a = x(p, c0), b = x(p, c0 + 1);
        const double cs = tab.cos(p, j), sn = dir * tab.sin(p, j);
        out(p, c0) = a * cs - b * sn;
        out(p, c0 + 1) = a * sn + b * cs;
      }
  return out;
}

}  // namespace

Var rope(Var x, int n_heads, double base) {
  if (n_heads <= 0 || x.cols() % n_heads != 0 || (x.cols() / n_heads) % 2 != 0)
    throw ShapeError("rope: width must split into even-sized heads");
  Tape* t = x.tape;
  const int ix = x.id;
  auto tab = std::make_shared<RopeTable>(rope_table(x.rows(), x.cols() / n_heads, base));
  Matrix out = rotate(x.value(), *tab, n_heads, 1.0);
  return t->push(std::move(out), t->requires_grad(x), [t, ix, tab, n_heads](const Matrix& g) {
    t->accumulate(ix, rotate(g, *tab, n_heads, -1.0));
  });
}

Var attention(Var q, Var k, Var v, int n_heads, bool causal) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Index n = q.rows(), m = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != m) throw ShapeError("attention: q/k/v shape mismatch");
  if (n_heads <= 0 || d % n_heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (causal && n != m) throw ShapeError("attention: causal masking needs square scores");
  Tape* t = q.tape;
  const Index hd = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(n_heads));
  Matrix out(n, d);
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = q.value().middleCols(h * hd, hd);
    const auto kh = k.value().middleCols(h * hd, hd);
    Matrix s = (qh * kh.transpose()) * inv_sqrt;
    for (Index i = 0; i < n; ++i) {
      const Index lim = causal ? i + 1 : m;
      const double mx = s.row(i).head(lim).maxCoeff();
      double z = 0.0;
      for (Index j = 0; j < m; ++j) {
        const double e = j < lim ? std::exp(s(i, j) - mx) : 0.0;
        s(i, j) = e;
        z += e;
      }
      s.row(i) /= z;
    }
    out.middleCols(h * hd, hd) = s * v.value().middleCols(h * hd, hd);
    (*probs)[static_cast<std::size_t>(h)] = std::move(s);
  }
  const int iq = q.id, ik = k.id, iv = v.id;
  const bool rg = t->requires_grad(q) || t->requires_grad(k) || t->requires_grad(v);
  return t->push(std::move(out), rg, [t, iq, ik, iv, probs, n_heads, hd, inv_sqrt, n, m, d](const Matrix& g) {
    const Matrix& qv = t->value(Var{t, iq});
    const Matrix& kv = t->value(Var{t, ik});
    const Matrix& vv = t->value(Var{t, iv});
    Matrix dq = Matrix::Zero(n, d), dk = Matrix::Zero(m, d), dv = Matrix::Zero(m, d);
    for (int h = 0; h < n_heads; ++h) {
      const Matrix& p = (*probs)[static_cast<std::size_t>(h)];
      const auto go = g.middleCols(h * hd, hd);
      dv.middleCols(h * hd, hd) = p.transpose() * go;
      Matrix dp = go * vv.middleCols(h * hd, hd).transpose();
      Matrix ds(n, m);
      for (Index i = 0; i < n; ++i) {
        const double dot = dp.row(i).dot(p.row(i));
        ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
      }
      ds *= inv_sqrt;
      dq.middleCols(h * hd, hd) = ds * kv.middleCols(h * hd, hd);
      dk.middleCols(h * hd, hd) = ds.transpose() * qv.middleCols(h * hd, hd);
    }
    t->accumulate(iq, dq);
    t->accumulate(ik, dk);
    t->accumulate(iv, dv);
  });
}

Var embedding(Var table, std::span<const int> ids) {
  Tape* t = table.tape;
  const Index vocab = table.rows(), d = table.cols();
  Matrix out(static_cast<Index>(ids.size()), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab)
      throw InvalidTokenId("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  const int it = table.id;
  std::vector<int> idv(ids.begin(), ids.end());
  return t->push(std::move(out), t->requires_grad(table), [t, it, idv, vocab, d](const Matrix& g) {
    Matrix full = Matrix::Zero(vocab, d);
    for (std::size_t i = 0; i < idv.size(); ++i) full.row(idv[i]) += g.row(static_cast<Index>(i));
    t->accumulate(it, full);
  });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const Index n = logits.rows(), vocab = logits.cols();
  if (static_cast<Index>(targets.size()) != n) throw ShapeError("cross_entropy: one target per row required");
  Tape* t = logits.tape;
  const Matrix& z = logits.value();
  auto probs = std::make_shared<Matrix>(n, vocab);
  double total = 0.0;
  int count = 0;
  for (Index i = 0; i < n; ++i) {
    const double mx = z.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (z.row(i).array() - mx).exp().matrix();
    const double se = e.sum();
    probs->row(i) = e / se;
    const int tgt = targets[static_cast<std::size_t>(i)];
    if (tgt < 0) continue;
    if (tgt >= vocab) throw InvalidTokenId("cross_entropy: target outside vocabulary");
    total += (mx + std::log(se)) - z(i, tgt);
    ++count;
  }
  if (count == 0) throw InvalidInput("cross_entropy: no target tokens");
  Matrix out(1, 1);
  out(0, 0) = total / count;
  const int il = logits.id;
  std::vector<int> tv(targets.begin(), targets.end());
  return t->push(std::move(out), t->requires_grad(logits), [t, il, probs, tv, count, n](const Matrix& g) {
    Matrix d = Matrix::Zero(probs->rows(), probs->cols());
    const double w = g(0, 0) / count;
    for (Index i = 0; i < n; ++i) {
      const int tgt = tv[static_cast<std::size_t>(i)];
      if (tgt < 0) continue;
      d.row(i) = probs->row(i) * w;
      d(i, tgt) -= w;
    }
    t->accumulate(il, d);
  });
}

Var row_norms(Var w) {
  Tape* t = w.tape;
  const int iw = w.id;
  Matrix out = w.value().rowwise().norm();
  return t->push(std::move(out), t->requires_grad(w), [t, iw](const Matrix& g) {
    const Matrix& wv = t->value(Var{t, iw});
    Matrix d(wv.rows(), wv.cols());
    for (Index i = 0; i < wv.rows(); ++i) {
      const double nrm = wv.row(i).norm();
      d.row(i) = nrm > 0.0 ? Eigen::RowVectorXd(wv.row(i) * (g(i, 0) / nrm))
                           : Eigen::RowVectorXd::Zero(wv.cols());
    }
    t->accumulate(iw, d);
  });
}

Var scale_rows(Var w, Var v) {
  require_same_tape(w, v);
  if (v.cols() != 1 || v.rows() != w.rows()) throw ShapeError("scale_rows: expected one factor per row");
  Tape* t = w.tape;
  const int iw = w.id, iv = v.id;
  Matrix out = v.value().col(0).asDiagonal() * w.value();
  return t->push(std::move(out), t->requires_grad(w) || t->requires_grad(v), [t, iw, iv](const Matrix& g) {
    const Matrix& wv = t->value(Var{t, iw});
    const Matrix& vv = t->value(Var{t, iv});
    t->accumulate(iw, vv.col(0).asDiagonal() * g);
    t->accumulate(iv, g.cwiseProduct(wv).rowwise().sum());
  });
}

Var scale_cols(Var x, Var v) {
  require_same_tape(x, v);
  if (v.cols() != 1 || v.rows() != x.cols()) throw ShapeError("scale_cols: expected one factor per column");
  Tape* t = x.tape;
  const int ix = x.id, iv = v.id;
  Matrix out = x.value() * v.value().col(0).asDiagonal();
  return t->push(std::move(out), t->requires_grad(x) || t->requires_grad(v), [t, ix, iv](const Matrix& g) {
    const Matrix& xv = t->value(Var{t, ix});
    const Matrix& vv = t->value(Var{t, iv});
    t->accumulate(ix, g * vv.col(0).asDiagonal());
    t->accumulate(iv, g.cwiseProduct(xv).colwise().sum().transpose());
  });
}

Var mask(Var x, const Matrix& m) {
  if (m.rows() != x.rows() || m.cols() != x.cols()) throw ShapeError("mask: shape mismatch");
  Tape* t = x.tape;
  const int ix = x.id;
  return t->push(x.value().cwiseProduct(m), t->requires_grad(x),
                 [t, ix, m](const Matrix& g) { t->accumulate(ix, g.cwiseProduct(m)); });
}

}  // namespace merlin::ag
