#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every primitive evaluated on it together with a closure that
// propagates adjoints to its inputs. Batched quantities are laid out one
// sample per row; the "b*" primitives treat each row as a small flattened
// row-major matrix so per-sample linear algebra stays on the tape.

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

namespace rbflow::ad {

using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 variable.
  double scalar() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// A named trainable tensor. Owned by the model; the tape only references it.
struct Parameter {
  std::string name;
  Tensor value;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad)>;

  /// With `record == false` no backward closures are stored; values only.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor value);
  Var constant(double value);
  /// Differentiable input.
  Var leaf(Tensor value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(const Parameter& p);

  /// Seeds d(out)/d(out) = 1 and runs the recorded closures in reverse.
  void backward(const Var& out);

  /// Adjoint accumulated for `v` (zeros if none reached it).
  Tensor grad(const Var& v) const;

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Primitive construction hook. `inputs` decide whether the result needs a
  /// gradient; the closure is dropped when none does or recording is off.
  Var push(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var push(Tensor value, const std::vector<Var>& inputs, Backward backward);

  /// Adds `g` into the adjoint of node `id` if it requires a gradient.
  void accumulate(int id, const Tensor& g);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> params_;
  bool record_;
};

// Elementwise arithmetic. Shapes broadcast when a dimension is 1.
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator+(const Var& a, double s);
Var operator+(double s, const Var& a);
Var operator-(const Var& a, double s);
Var operator-(double s, const Var& a);
Var operator*(const Var& a, double s);
Var operator*(double s, const Var& a);
Var operator/(const Var& a, double s);
Var operator/(double s, const Var& a);

Var exp(const Var& x);
Var log(const Var& x);
Var sinh(const Var& x);
Var cosh(const Var& x);
Var tanh(const Var& x);
Var sqrt(const Var& x);
Var square(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
/// Exact GELU, x * Phi(x).
Var gelu(const Var& x);
/// log(cosh(x)) without overflow.
Var logcosh(const Var& x);
Var clamp(const Var& x, double lo, double hi);

Var sum(const Var& x);
Var mean(const Var& x);
/// Sum over columns: (r x c) -> (r x 1).
Var row_sum(const Var& x);
/// Sum over rows: (r x c) -> (1 x c).
Var col_sum(const Var& x);
Var row_dot(const Var& a, const Var& b);
Var row_norm(const Var& x);

Var matmul(const Var& a, const Var& b);
Var softmax_rows(const Var& x);

/// Row-wise 3-vector cross product of (r x 3) inputs.
Var cross3(const Var& a, const Var& b);
/// Row-wise determinant of 3x3 matrices given as three (r x 3) rows,
/// computed as (a0 x a1) . a2.
Var det3(const Var& a0, const Var& a1, const Var& a2);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index n);
Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index n);
/// Row-major reinterpretation.
Var reshape(const Var& x, Eigen::Index rows, Eigen::Index cols);
/// Each column repeated `k` times consecutively.
Var repeat_cols(const Var& x, Eigen::Index k);

/// Per-row matrix product: row r of `a` is an (m x k) matrix, row r of `b`
/// a (k x n) matrix; the result row is their (m x n) product.
Var bmm(const Var& a, const Var& b, int m, int k, int n);
/// Per-row transpose of (m x n) matrices.
Var btranspose(const Var& a, int m, int n);

/// Per-row map v -> radius * tanh(|v|) v / |v| (0 at v = 0).
Var ball_squash(const Var& v, double radius);

/// Gradients of a scalar function of several tensors.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

std::vector<Tensor> grad(const ScalarFn& f, const std::vector<Tensor>& params);

/// max over entries of |g_AD - g_FD| / max(1, |g_FD|) with central differences.
double finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& params, double h = 1e-5);

}  // namespace rbflow::ad
