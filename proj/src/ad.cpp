#include "posegen/ad.hpp"

#include <cmath>
#include <stdexcept>

namespace posegen::ad {

const Matrix& Var::value() const { return tape->value(*this); }
const Matrix& Var::grad() const { return tape->grad(*this); }

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Matrix value, const std::vector<Var>& parents, BackwardFn backward) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || nodes_[p.id].requires_grad;
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::grad(Var v) const {
  const auto& n = nodes_[v.id];
  return n.grad.size() ? n.grad : empty_;
}

void Tape::accumulate(Var v, const Matrix& g) {
  auto& n = nodes_[v.id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::zero_grads() {
  for (auto& n : nodes_) n.grad.resize(0, 0);
}

void Tape::backward(Var root) {
  if (value(root).size() != 1) throw std::invalid_argument("backward: root must be scalar");
  accumulate(root, Matrix::Ones(1, 1));
  for (int i = root.id; i >= 0; --i) {
    auto& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  return t.record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

Var add(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "add");
  return a.tape->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "sub");
  return a.tape->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "mul");
  return a.tape->record(a.value().cwiseProduct(b.value()), {a, b},
                        [a, b](Tape& t, const Matrix& g) {
                          if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
                          if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
                        });
}

Var scale(Var a, double s) {
  return a.tape->record(a.value() * s, {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

Var add_scalar(Var a, double s) {
  Matrix v = a.value().array() + s;
  return a.tape->record(std::move(v), {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Matrix v = a.value().rowwise() + row.value().row(0);
  return a.tape->record(std::move(v), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var mul_col(Var a, Var col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw std::invalid_argument("mul_col: shape mismatch");
  Matrix v = a.value().array().colwise() * col.value().col(0).array();
  return a.tape->record(std::move(v), {a, col}, [a, col](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) {
      Matrix ga = g.array().colwise() * t.value(col).col(0).array();
      t.accumulate(a, ga);
    }
    if (t.requires_grad(col)) t.accumulate(col, g.cwiseProduct(t.value(a)).rowwise().sum());
  });
}

Var tanh(Var a) {
  Matrix y = a.value().array().tanh();
  return a.tape->record(y, {a}, [a, y](Tape& t, const Matrix& g) {
    t.accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var sigmoid(Var a) {
  Matrix y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return a.tape->record(y, {a}, [a, y](Tape& t, const Matrix& g) {
    t.accumulate(a, (g.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

namespace {
inline double softplus_scalar(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

Var softplus(Var a) {
  Matrix y = a.value().unaryExpr([](double x) { return softplus_scalar(x); });
  return a.tape->record(std::move(y), {a}, [a](Tape& t, const Matrix& g) {
    Matrix d = t.value(a).unaryExpr([](double x) { return sigmoid_scalar(x); });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

Var silu(Var a) {
  const Matrix& x = a.value();
  Matrix s = x.unaryExpr([](double v) { return sigmoid_scalar(v); });
  Matrix y = x.cwiseProduct(s);
  return a.tape->record(std::move(y), {a}, [a, s](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix d = (s.array() * (1.0 + x.array() * (1.0 - s.array()))).matrix();
    t.accumulate(a, g.cwiseProduct(d));
  });
}

Var square(Var a) {
  return a.tape->record(a.value().cwiseAbs2(), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, 2.0 * g.cwiseProduct(t.value(a)));
  });
}

Var sqrt(Var a, double eps) {
  Matrix y = (a.value().array() + eps).sqrt();
  return a.tape->record(y, {a}, [a, y](Tape& t, const Matrix& g) {
    Matrix d = y.unaryExpr([](double v) { return v > 0.0 ? 0.5 / v : 0.0; });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

Var sum(Var a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  const auto r = a.rows(), c = a.cols();
  return a.tape->record(std::move(v), {a}, [a, r, c](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / n);
}

Var row_sum(Var a) {
  const auto c = a.cols();
  return a.tape->record(a.value().rowwise().sum(), {a}, [a, c](Tape& t, const Matrix& g) {
    t.accumulate(a, g.replicate(1, c));
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
  const auto r = a.rows(), c = a.cols();
  return a.tape->record(a.value().middleCols(start, count), {a},
                        [a, start, count, r, c](Tape& t, const Matrix& g) {
                          Matrix full = Matrix::Zero(r, c);
                          full.middleCols(start, count) = g;
                          t.accumulate(a, full);
                        });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  const auto r = a.rows(), c = a.cols();
  return a.tape->record(a.value().middleRows(start, count), {a},
                        [a, start, count, r, c](Tape& t, const Matrix& g) {
                          Matrix full = Matrix::Zero(r, c);
                          full.middleRows(start, count) = g;
                          t.accumulate(a, full);
                        });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const auto r = parts.front().rows();
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.cols();
  }
  Matrix v(r, total);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return parts.front().tape->record(std::move(v), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      const auto c = t.value(p).cols();
      if (t.requires_grad(p)) t.accumulate(p, g.middleCols(off, c));
      off += c;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const auto c = parts.front().cols();
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw std::invalid_argument("concat_rows: col mismatch");
    total += p.rows();
  }
  Matrix v(total, c);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return parts.front().tape->record(std::move(v), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      const auto r = t.value(p).rows();
      if (t.requires_grad(p)) t.accumulate(p, g.middleRows(off, r));
      off += r;
    }
  });
}

Var gather_cols(Var a, const std::vector<int>& cols) {
  Matrix v(a.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) v.col(static_cast<Eigen::Index>(i)) = a.value().col(cols[i]);
  const auto r = a.rows(), c = a.cols();
  return a.tape->record(std::move(v), {a}, [a, cols, r, c](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(r, c);
    for (std::size_t i = 0; i < cols.size(); ++i) full.col(cols[i]) += g.col(static_cast<Eigen::Index>(i));
    t.accumulate(a, full);
  });
}

Var detach(Var a) { return a.tape->constant(a.value()); }

Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return sub(a, b); }
Var operator*(Var a, double s) { return scale(a, s); }

void ParamSet::add(std::string name, Matrix value) {
  names.push_back(std::move(name));
  values.push_back(std::move(value));
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values) n += static_cast<std::size_t>(v.size());
  return n;
}

std::vector<Var> ParamSet::bind(Tape& tape, bool requires_grad) const {
  std::vector<Var> out;
  out.reserve(values.size());
  for (const auto& v : values) out.push_back(tape.leaf(v, requires_grad));
  return out;
}

bool ParamSet::all_finite() const {
  for (const auto& v : values)
    if (!v.allFinite()) return false;
  return true;
}

double ParamSet::l2_norm() const {
  double s = 0.0;
  for (const auto& v : values) s += v.squaredNorm();
  return std::sqrt(s);
}

std::vector<Matrix> gradients(const Tape& tape, const std::vector<Var>& vars) {
  std::vector<Matrix> out;
  out.reserve(vars.size());
  for (const auto& v : vars) {
    const Matrix& g = tape.grad(v);
    out.push_back(g.size() ? g : Matrix::Zero(v.rows(), v.cols()));
  }
  return out;
}

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParamSet& params, const std::vector<Matrix>& grads) {
  if (grads.size() != params.size()) throw std::invalid_argument("Adam: gradient count mismatch");
  if (m_.empty()) {
    for (const auto& v : params.values) {
      m_.push_back(Matrix::Zero(v.rows(), v.cols()));
      v_.push_back(Matrix::Zero(v.rows(), v.cols()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseAbs2();
    if (lr_ == 0.0) continue;
    params.values[i].array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

}  // namespace posegen::ad
