#pragma once

// Minimal reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records a DAG of matrix-valued nodes. Each node that depends on a
// gradient-requiring leaf stores a closure that, given the gradient of the
// final scalar with respect to the node value, accumulates gradients into its
// parents. Nodes are visited in reverse creation order, which is a valid
// topological order because parents always precede children.

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <vector>

namespace posegen::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

  Var leaf(Matrix value, bool requires_grad = true);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  /// Records an op output. `backward` is kept only when some parent needs
  /// gradients; it must call accumulate() on the parents.
  Var record(Matrix value, const std::vector<Var>& parents, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every node.
  void backward(Var root);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  const Matrix& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  void accumulate(Var v, const Matrix& g);
  void zero_grads();
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;  // empty until something accumulates into it
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
  Matrix empty_;
};

// Elementwise and linear-algebra ops. Shapes follow Eigen conventions; batch
// elements are rows.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_row(Var a, Var row);  // a (n x m) + row (1 x m)
Var mul_col(Var a, Var col);  // a (n x m) * col (n x 1), per row
Var tanh(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var silu(Var a);
Var square(Var a);
Var sqrt(Var a, double eps = 0.0);
Var sum(Var a);
Var mean(Var a);
Var row_sum(Var a);  // n x 1
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var gather_cols(Var a, const std::vector<int>& cols);
Var detach(Var a);

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, double s);

/// Named set of parameter tensors with helpers to bind them onto a tape.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Matrix> values;

  void add(std::string name, Matrix value);
  std::size_t size() const { return values.size(); }
  std::size_t scalar_count() const;
  std::vector<Var> bind(Tape& tape, bool requires_grad = true) const;
  bool all_finite() const;
  double l2_norm() const;
};

std::vector<Matrix> gradients(const Tape& tape, const std::vector<Var>& vars);

/// Adaptive-moment first-order optimizer.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ParamSet& params, const std::vector<Matrix>& grads);
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

}  // namespace posegen::ad
