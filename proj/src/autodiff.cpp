#include "rbflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rbflow::ad {

using Eigen::Index;
using RowMap = Eigen::Map<Tensor>;
using ConstRowMap = Eigen::Map<const Tensor>;

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw std::logic_error("use of an unbound autodiff variable");
  return tape_->value(id_);
}

double Var::scalar() const {
  const Tensor& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw std::logic_error("scalar() on a non-1x1 variable");
  return v(0, 0);
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(double value) { return constant(Tensor::Constant(1, 1, value)); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, record_});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(const Parameter& p) {
  if (auto it = params_.find(&p); it != params_.end()) return Var(this, it->second);
  Var v = leaf(p.value);
  params_.emplace(&p, v.id());
  return v;
}

Var Tape::push(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  if (record_) {
    for (const Var& v : inputs) {
      if (v.tape() != this) throw std::logic_error("mixing variables from different tapes");
      needs = needs || nodes_[v.id()].requires_grad;
    }
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::push(Tensor value, const std::vector<Var>& inputs, Backward backward) {
  bool needs = false;
  if (record_) {
    for (const Var& v : inputs) {
      if (v.tape() != this) throw std::logic_error("mixing variables from different tapes");
      needs = needs || nodes_[v.id()].requires_grad;
    }
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(const Var& out) {
  if (!record_) throw std::logic_error("backward() on a non-recording tape");
  if (out.tape() != this) throw std::logic_error("backward() on a foreign variable");
  if (out.rows() != 1 || out.cols() != 1) throw std::logic_error("backward() needs a 1x1 output");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  accumulate(out.id(), Tensor::Ones(1, 1));
  for (int i = out.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    // The closure may append nothing but may touch other nodes' grads, so keep
    // a copy of this node's adjoint that survives any reallocation.
    const Tensor g = n.grad;
    Backward fn = n.backward;
    fn(*this, g);
  }
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Tensor::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

namespace {

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::logic_error("unbound autodiff variable");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape() != b.tape() || !a.valid()) throw std::logic_error("variables on different tapes");
  return *a.tape();
}

Index bdim(Index a, Index b, const char* op) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw std::invalid_argument(std::string("shape mismatch in ") + op);
}

Tensor expand(const Tensor& a, Index r, Index c) {
  if (a.rows() == r && a.cols() == c) return a;
  if (a.rows() == 1 && a.cols() == 1) return Tensor::Constant(r, c, a(0, 0));
  if (a.rows() == 1) return a.replicate(r, 1);
  return a.replicate(1, c);
}

Tensor reduce_to(const Tensor& g, Index r, Index c) {
  if (g.rows() == r && g.cols() == c) return g;
  Tensor out = g;
  if (r == 1 && out.rows() != 1) out = out.colwise().sum().eval();
  if (c == 1 && out.cols() != 1) out = out.rowwise().sum().eval();
  return out;
}

template <typename Fwd, typename Da, typename Db>
Var binary(const Var& a, const Var& b, const char* name, Fwd fwd, Da da, Db db) {
  Tape& t = tape_of(a, b);
  const Index r = bdim(a.rows(), b.rows(), name);
  const Index c = bdim(a.cols(), b.cols(), name);
  const Tensor av = expand(a.value(), r, c);
  const Tensor bv = expand(b.value(), r, c);
  Tensor out = fwd(av, bv);
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib, r, c, da, db](Tape& tp, const Tensor& g) {
    const Tensor& va = tp.value(ia);
    const Tensor& vb = tp.value(ib);
    const Tensor ea = expand(va, r, c);
    const Tensor eb = expand(vb, r, c);
    if (tp.requires_grad(ia)) tp.accumulate(ia, reduce_to(da(g, ea, eb), va.rows(), va.cols()));
    if (tp.requires_grad(ib)) tp.accumulate(ib, reduce_to(db(g, ea, eb), vb.rows(), vb.cols()));
  });
}

/// Elementwise unary op with derivative expressed through input x and output y.
template <typename Fwd, typename Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv) {
  Tape& t = tape_of(x);
  Tensor y = x.value().unaryExpr(fwd);
  const int ix = x.id();
  const int iy = static_cast<int>(t.size());
  return t.push(std::move(y), {x}, [ix, iy, deriv](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ix);
    const Tensor& yv = tp.value(iy);
    Tensor d(xv.rows(), xv.cols());
    for (Index i = 0; i < xv.size(); ++i) d.data()[i] = g.data()[i] * deriv(xv.data()[i], yv.data()[i]);
    tp.accumulate(ix, d);
  });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Arithmetic

Var operator+(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](const Tensor& x, const Tensor& y) -> Tensor { return x + y; },
      [](const Tensor& g, const Tensor&, const Tensor&) -> Tensor { return g; },
      [](const Tensor& g, const Tensor&, const Tensor&) -> Tensor { return g; });
}

Var operator-(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](const Tensor& x, const Tensor& y) -> Tensor { return x - y; },
      [](const Tensor& g, const Tensor&, const Tensor&) -> Tensor { return g; },
      [](const Tensor& g, const Tensor&, const Tensor&) -> Tensor { return -g; });
}

Var operator*(const Var& a, const Var& b) {
  return binary(
      a, b, "mul",
      [](const Tensor& x, const Tensor& y) -> Tensor { return x.cwiseProduct(y); },
      [](const Tensor& g, const Tensor&, const Tensor& y) -> Tensor { return g.cwiseProduct(y); },
      [](const Tensor& g, const Tensor& x, const Tensor&) -> Tensor { return g.cwiseProduct(x); });
}

Var operator/(const Var& a, const Var& b) {
  return binary(
      a, b, "div",
      [](const Tensor& x, const Tensor& y) -> Tensor { return x.cwiseQuotient(y); },
      [](const Tensor& g, const Tensor&, const Tensor& y) -> Tensor { return g.cwiseQuotient(y); },
      [](const Tensor& g, const Tensor& x, const Tensor& y) -> Tensor {
        return (-g.array() * x.array() / (y.array() * y.array())).matrix();
      });
}

Var operator-(const Var& a) { return a * -1.0; }

Var operator*(const Var& a, double s) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.push(a.value() * s, {a}, [ia, s](Tape& tp, const Tensor& g) { tp.accumulate(ia, g * s); });
}

Var operator*(double s, const Var& a) { return a * s; }
Var operator/(const Var& a, double s) { return a * (1.0 / s); }

Var operator/(double s, const Var& a) {
  return unary(a, [s](double v) { return s / v; }, [s](double v, double) { return -s / (v * v); });
}

Var operator+(const Var& a, double s) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Tensor out = a.value().array() + s;
  return t.push(std::move(out), {a}, [ia](Tape& tp, const Tensor& g) { tp.accumulate(ia, g); });
}

Var operator+(double s, const Var& a) { return a + s; }
Var operator-(const Var& a, double s) { return a + (-s); }
Var operator-(double s, const Var& a) { return (a * -1.0) + s; }

// ---------------------------------------------------------------------------
// Elementwise functions

Var exp(const Var& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sinh(const Var& x) {
  return unary(x, [](double v) { return std::sinh(v); }, [](double v, double) { return std::cosh(v); });
}

Var cosh(const Var& x) {
  return unary(x, [](double v) { return std::cosh(v); }, [](double v, double) { return std::sinh(v); });
}

Var tanh(const Var& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var sqrt(const Var& x) {
  return unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Var square(const Var& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sigmoid(const Var& x) {
  return unary(x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& x) {
  return unary(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return sigmoid_scalar(v); });
}

Var gelu(const Var& x) {
  static const double kInvSqrt2 = 1.0 / std::sqrt(2.0);
  static const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * M_PI);
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Var logcosh(const Var& x) {
  return unary(
      x,
      [](double v) {
        const double a = std::abs(v);
        return a + std::log1p(std::exp(-2.0 * a)) - M_LN2;
      },
      [](double v, double) { return std::tanh(v); });
}

Var clamp(const Var& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& x) {
  Tape& t = tape_of(x);
  const int ix = x.id();
  const Index r = x.rows(), c = x.cols();
  return t.push(Tensor::Constant(1, 1, x.value().sum()), {x}, [ix, r, c](Tape& tp, const Tensor& g) {
    tp.accumulate(ix, Tensor::Constant(r, c, g(0, 0)));
  });
}

Var mean(const Var& x) { return sum(x) * (1.0 / static_cast<double>(x.value().size())); }

Var row_sum(const Var& x) {
  Tape& t = tape_of(x);
  const int ix = x.id();
  const Index c = x.cols();
  Tensor out = x.value().rowwise().sum();
  return t.push(std::move(out), {x}, [ix, c](Tape& tp, const Tensor& g) {
    tp.accumulate(ix, g.replicate(1, c));
  });
}

Var col_sum(const Var& x) {
  Tape& t = tape_of(x);
  const int ix = x.id();
  const Index r = x.rows();
  Tensor out = x.value().colwise().sum();
  return t.push(std::move(out), {x}, [ix, r](Tape& tp, const Tensor& g) {
    tp.accumulate(ix, g.replicate(r, 1));
  });
}

Var row_dot(const Var& a, const Var& b) { return row_sum(a * b); }

Var row_norm(const Var& x) {
  Tape& t = tape_of(x);
  const int ix = x.id();
  const int iy = static_cast<int>(t.size());
  Tensor out = x.value().rowwise().norm();
  return t.push(std::move(out), {x}, [ix, iy](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ix);
    const Tensor& n = tp.value(iy);
    Tensor d(xv.rows(), xv.cols());
    for (Index i = 0; i < xv.rows(); ++i) {
      const double s = n(i, 0) > 0.0 ? g(i, 0) / n(i, 0) : 0.0;
      d.row(i) = xv.row(i) * s;
    }
    tp.accumulate(ix, d);
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul shape mismatch");
  Tensor out = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

Var softmax_rows(const Var& x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  Tensor y(xv.rows(), xv.cols());
  for (Index i = 0; i < xv.rows(); ++i) {
    const double m = xv.row(i).maxCoeff();
    y.row(i) = (xv.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  const int ix = x.id();
  const int iy = static_cast<int>(t.size());
  return t.push(std::move(y), {x}, [ix, iy](Tape& tp, const Tensor& g) {
    const Tensor& yv = tp.value(iy);
    Tensor d(yv.rows(), yv.cols());
    for (Index i = 0; i < yv.rows(); ++i) {
      const double s = g.row(i).dot(yv.row(i));
      d.row(i) = (yv.row(i).array() * (g.row(i).array() - s)).matrix();
    }
    tp.accumulate(ix, d);
  });
}

namespace {

void cross_rows(const Tensor& a, const Tensor& b, Tensor& out) {
  for (Index i = 0; i < a.rows(); ++i) {
    out(i, 0) = a(i, 1) * b(i, 2) - a(i, 2) * b(i, 1);
    out(i, 1) = a(i, 2) * b(i, 0) - a(i, 0) * b(i, 2);
    out(i, 2) = a(i, 0) * b(i, 1) - a(i, 1) * b(i, 0);
  }
}

}  // namespace

Var cross3(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != 3 || b.cols() != 3 || a.rows() != b.rows()) {
    throw std::invalid_argument("cross3 expects two (r x 3) inputs");
  }
  Tensor out(a.rows(), 3);
  cross_rows(a.value(), b.value(), out);
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    Tensor d(g.rows(), 3);
    if (tp.requires_grad(ia)) {
      cross_rows(tp.value(ib), g, d);
      tp.accumulate(ia, d);
    }
    if (tp.requires_grad(ib)) {
      cross_rows(g, tp.value(ia), d);
      tp.accumulate(ib, d);
    }
  });
}

Var det3(const Var& a0, const Var& a1, const Var& a2) { return row_dot(cross3(a0, a1), a2); }

// ---------------------------------------------------------------------------
// Shape manipulation

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols of nothing");
  Tape& t = tape_of(parts.front());
  const Index r = parts.front().rows();
  Index c = 0;
  for (const Var& p : parts) {
    if (p.rows() != r) throw std::invalid_argument("concat_cols row mismatch");
    c += p.cols();
  }
  Tensor out(r, c);
  std::vector<std::pair<int, Index>> spans;
  Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.cols();
  }
  return t.push(std::move(out), parts, [spans](Tape& tp, const Tensor& g) {
    for (const auto& [id, o] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleCols(o, tp.value(id).cols()));
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows of nothing");
  Tape& t = tape_of(parts.front());
  const Index c = parts.front().cols();
  Index r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) throw std::invalid_argument("concat_rows column mismatch");
    r += p.rows();
  }
  Tensor out(r, c);
  std::vector<std::pair<int, Index>> spans;
  Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.rows();
  }
  return t.push(std::move(out), parts, [spans](Tape& tp, const Tensor& g) {
    for (const auto& [id, o] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleRows(o, tp.value(id).rows()));
    }
  });
}

Var slice_cols(const Var& x, Index start, Index n) {
  Tape& t = tape_of(x);
  if (start < 0 || n < 0 || start + n > x.cols()) throw std::out_of_range("slice_cols");
  Tensor out = x.value().middleCols(start, n);
  const int ix = x.id();
  const Index r = x.rows(), c = x.cols();
  return t.push(std::move(out), {x}, [ix, r, c, start, n](Tape& tp, const Tensor& g) {
    Tensor d = Tensor::Zero(r, c);
    d.middleCols(start, n) = g;
    tp.accumulate(ix, d);
  });
}

Var slice_rows(const Var& x, Index start, Index n) {
  Tape& t = tape_of(x);
  if (start < 0 || n < 0 || start + n > x.rows()) throw std::out_of_range("slice_rows");
  Tensor out = x.value().middleRows(start, n);
  const int ix = x.id();
  const Index r = x.rows(), c = x.cols();
  return t.push(std::move(out), {x}, [ix, r, c, start, n](Tape& tp, const Tensor& g) {
    Tensor d = Tensor::Zero(r, c);
    d.middleRows(start, n) = g;
    tp.accumulate(ix, d);
  });
}

Var reshape(const Var& x, Index rows, Index cols) {
  Tape& t = tape_of(x);
  if (rows * cols != x.value().size()) throw std::invalid_argument("reshape size mismatch");
  Tensor out = ConstRowMap(x.value().data(), rows, cols);
  const int ix = x.id();
  const Index r = x.rows(), c = x.cols();
  return t.push(std::move(out), {x}, [ix, r, c](Tape& tp, const Tensor& g) {
    tp.accumulate(ix, ConstRowMap(g.data(), r, c));
  });
}

Var repeat_cols(const Var& x, Index k) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols() * k);
  for (Index i = 0; i < xv.rows(); ++i)
    for (Index j = 0; j < xv.cols(); ++j) out.row(i).segment(j * k, k).setConstant(xv(i, j));
  const int ix = x.id();
  return t.push(std::move(out), {x}, [ix, k](Tape& tp, const Tensor& g) {
    const Index r = g.rows(), c = g.cols() / k;
    Tensor d(r, c);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) d(i, j) = g.row(i).segment(j * k, k).sum();
    tp.accumulate(ix, d);
  });
}

Var bmm(const Var& a, const Var& b, int m, int k, int n) {
  Tape& t = tape_of(a, b);
  if (a.cols() != m * k || b.cols() != k * n || a.rows() != b.rows()) {
    throw std::invalid_argument("bmm shape mismatch");
  }
  const Index rows = a.rows();
  Tensor out(rows, m * n);
  for (Index i = 0; i < rows; ++i) {
    RowMap(out.row(i).data(), m, n).noalias() =
        ConstRowMap(a.value().row(i).data(), m, k) * ConstRowMap(b.value().row(i).data(), k, n);
  }
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ia);
    const Tensor& bv = tp.value(ib);
    const bool ga = tp.requires_grad(ia), gb = tp.requires_grad(ib);
    Tensor da(ga ? av.rows() : 0, av.cols());
    Tensor db(gb ? bv.rows() : 0, bv.cols());
    for (Index i = 0; i < g.rows(); ++i) {
      ConstRowMap gi(g.row(i).data(), m, n);
      if (ga) RowMap(da.row(i).data(), m, k).noalias() = gi * ConstRowMap(bv.row(i).data(), k, n).transpose();
      if (gb) RowMap(db.row(i).data(), k, n).noalias() = ConstRowMap(av.row(i).data(), m, k).transpose() * gi;
    }
    if (ga) tp.accumulate(ia, da);
    if (gb) tp.accumulate(ib, db);
  });
}

Var btranspose(const Var& a, int m, int n) {
  Tape& t = tape_of(a);
  if (a.cols() != m * n) throw std::invalid_argument("btranspose shape mismatch");
  Tensor out(a.rows(), m * n);
  for (Index i = 0; i < a.rows(); ++i) {
    RowMap(out.row(i).data(), n, m) = ConstRowMap(a.value().row(i).data(), m, n).transpose();
  }
  const int ia = a.id();
  return t.push(std::move(out), {a}, [ia, m, n](Tape& tp, const Tensor& g) {
    Tensor d(g.rows(), g.cols());
    for (Index i = 0; i < g.rows(); ++i) {
      RowMap(d.row(i).data(), m, n) = ConstRowMap(g.row(i).data(), n, m).transpose();
    }
    tp.accumulate(ia, d);
  });
}

namespace {

// f(n) = tanh(n) / n and f'(n) / n.
std::pair<double, double> squash_factors(double n) {
  if (n < 1e-2) {
    const double n2 = n * n;
    return {1.0 - n2 / 3.0 + 2.0 * n2 * n2 / 15.0, -2.0 / 3.0 + 8.0 * n2 / 15.0 - 34.0 * n2 * n2 / 105.0};
  }
  const double th = std::tanh(n);
  const double sech2 = 1.0 - th * th;
  return {th / n, (n * sech2 - th) / (n * n * n)};
}

}  // namespace

Var ball_squash(const Var& v, double radius) {
  Tape& t = tape_of(v);
  const Tensor& vv = v.value();
  Tensor out(vv.rows(), vv.cols());
  for (Index i = 0; i < vv.rows(); ++i) {
    out.row(i) = vv.row(i) * (radius * squash_factors(vv.row(i).norm()).first);
  }
  const int iv = v.id();
  return t.push(std::move(out), {v}, [iv, radius](Tape& tp, const Tensor& g) {
    const Tensor& vv = tp.value(iv);
    Tensor d(vv.rows(), vv.cols());
    for (Index i = 0; i < vv.rows(); ++i) {
      const auto [f, fp_over_n] = squash_factors(vv.row(i).norm());
      d.row(i) = radius * (f * g.row(i) + fp_over_n * vv.row(i).dot(g.row(i)) * vv.row(i));
    }
    tp.accumulate(iv, d);
  });
}

// ---------------------------------------------------------------------------
// Drivers

std::vector<Tensor> grad(const ScalarFn& f, const std::vector<Tensor>& params) {
  Tape tape(true);
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p));
  Var out = f(tape, leaves);
  tape.backward(out);
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const Var& l : leaves) grads.push_back(tape.grad(l));
  return grads;
}

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& params) {
  Tape tape(false);
  std::vector<Var> leaves;
  for (const Tensor& p : params) leaves.push_back(tape.constant(p));
  return f(tape, leaves).scalar();
}

}  // namespace

double finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& params, double h) {
  const std::vector<Tensor> g = grad(f, params);
  std::vector<Tensor> work = params;
  double worst = 0.0;
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (Index i = 0; i < work[p].size(); ++i) {
      const double orig = work[p].data()[i];
      work[p].data()[i] = orig + h;
      const double fp = evaluate(f, work);
      work[p].data()[i] = orig - h;
      const double fm = evaluate(f, work);
      work[p].data()[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, std::abs(g[p].data()[i] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace rbflow::ad
