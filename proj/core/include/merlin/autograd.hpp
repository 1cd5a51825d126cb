#pragma once

#include "merlin/tensor.hpp"

#include <functional>
#include <span>
#include <vector>

// Reverse-mode differentiation over row-major double matrices. A Tape records
// one forward pass; backward() walks it in reverse and accumulates gradients
// into the trainable Parameters that were read through Tape::parameter().
namespace merlin::ag {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Matrix value);
  /// Leaf whose gradient is kept on the tape (read back with grad()).
  Var variable(Matrix value);
  /// Leaf bound to a Parameter; gradients flow into `p.grad` only when
  /// `p.trainable` is set.
  Var parameter(Parameter& p);

  /// Disables gradient bookkeeping entirely (inference).
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  /// Gradient of the last backward() root with respect to `v`; zeros when
  /// nothing flowed into it.
  Matrix grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var push(Matrix value, bool requires_grad, std::function<void(const Matrix&)> back);
  void accumulate(int id, const Matrix& g);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool keep_grad = false;
    Parameter* param = nullptr;
    std::function<void(const Matrix&)> back;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// Element-wise and linear algebra.
Var matmul(Var a, Var b);
/// x · Wᵀ with W stored (out, in).
Var linear(Var x, Var w);
Var add(Var a, Var b);
/// Adds a 1×m row to every row of x.
Var add_row(Var x, Var row);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var gelu(Var a);
Var sum(Var a);
Var mean(Var a);

// Shape.
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, Index start, Index count);

// Neural-network building blocks.
Var rms_norm(Var x, Var gain, double eps = 1e-6);
/// Rotary position embedding applied per head; rows are positions.
Var rope(Var x, int n_heads, double base = 10000.0);
/// Multi-head scaled dot-product attention over already-projected q, k, v.
Var attention(Var q, Var k, Var v, int n_heads, bool causal);
/// Row lookup into `table`.
Var embedding(Var table, std::span<const int> ids);
/// Mean token cross-entropy of `logits` against `targets`; targets < 0 are
/// ignored. Returns a 1×1 value.
Var cross_entropy(Var logits, std::span<const int> targets);
/// Euclidean norm of every row, as a column vector.
Var row_norms(Var w);
/// Multiplies row i of `w` by `v(i, 0)`.
Var scale_rows(Var w, Var v);
/// Multiplies column j of `x` by `v(j, 0)`.
Var scale_cols(Var x, Var v);
/// Multiplies by a constant mask (dropout); the mask gets no gradient.
Var mask(Var x, const Matrix& m);

double gelu_scalar(double x);

}  // namespace merlin::ag
