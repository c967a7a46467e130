#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace lhg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

}  // namespace lhg

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// A Tape records every value produced during a forward pass together with a
// closure that pushes the output gradient back to its inputs. Values are
// double precision so that finite-difference checks stay meaningful.
namespace lhg::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  /// With `record == false` no backward closures are stored (inference).
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);
  Var parameter(const Matrix& value, std::size_t slot);

  /// Runs reverse accumulation from a 1x1 output.
  void backward(const Var& output);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix& grad(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id())].grad; }
  Matrix& grad_mut(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds the gradients of parameter leaves into `grads`, indexed by slot.
  void accumulate_parameter_grads(std::vector<Matrix>& grads) const;

  Var push(Matrix value, std::span<const Var> inputs, Backward backward);
  Var push(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
    long param_slot = -1;
  };

  std::vector<Node> nodes_;
  bool record_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

// Linear algebra.
Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);

// Elementwise. `add` also accepts a 1xC row for b, broadcast over rows.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);

Var gelu(const Var& a);
Var tanh(const Var& a);

/// Row softmax of (a + bias); bias is a constant additive mask (may be empty).
Var softmax_rows(const Var& a, const Matrix& bias = Matrix());
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// Shape manipulation.
Var concat_cols(std::span<const Var> parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& table, std::span<const int> rows);
/// im2col for 1-D convolution over rows: output row r holds input rows
/// r*stride - pad .. r*stride - pad + kernel - 1 laid side by side (zero padded).
Var unfold_rows(const Var& x, int kernel, int stride, int pad);
Var repeat_rows(const Var& x, int factor);
Var avg_pool_rows(const Var& x, int stride);
/// out[r] = x[r + 1] - x[r]
Var row_diff(const Var& x);

// Reductions to 1x1.
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_squares(const Var& a);
/// Mean over elements of the smooth-L1 (Huber, delta = 1) residual.
Var smooth_l1(const Var& pred, const Var& target);
/// Mean over rows of -logp(r, targets[r]).
Var nll_rows(const Var& logp, std::span<const int> targets);

}  // namespace lhg::ad
