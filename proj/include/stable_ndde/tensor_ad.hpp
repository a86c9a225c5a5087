/*
 * Copyright 2026 The stable_ndde Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef STABLE_NDDE_TENSOR_AD_HPP
#define STABLE_NDDE_TENSOR_AD_HPP

// Reverse-mode automatic differentiation over dense float64 arrays.
//
// A Tape records primitive operations in evaluation order. Every Var is a
// handle (tape, node index). Values are Eigen matrices; vectors are n x 1 and
// scalars 1 x 1. Tapes are single-threaded and rebuilt for every loss
// evaluation.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

namespace stable_ndde::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class Op : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  scale,
  mul,
  matmul,
  matvec,
  dot,
  sum,
  sqnorm,
  exp,
  log,
  sin,
  cos,
  sigmoid,
  relu,
  smoothed_relu,
  max_of,
  stop_gradient,
  concat,
  slice,
};

inline const char* op_name(Op op) {
  switch (op) {
  case Op::leaf: return "leaf";
  case Op::constant: return "constant";
  case Op::add: return "add";
  case Op::sub: return "sub";
  case Op::scale: return "scale";
  case Op::mul: return "mul";
  case Op::matmul: return "matmul";
  case Op::matvec: return "matvec";
  case Op::dot: return "dot";
  case Op::sum: return "sum";
  case Op::sqnorm: return "sqnorm";
  case Op::exp: return "exp";
  case Op::log: return "log";
  case Op::sin: return "sin";
  case Op::cos: return "cos";
  case Op::sigmoid: return "sigmoid";
  case Op::relu: return "relu";
  case Op::smoothed_relu: return "smoothed_relu";
  case Op::max_of: return "max_of";
  case Op::stop_gradient: return "stop_gradient";
  case Op::concat: return "concat";
  case Op::slice: return "slice";
  }
  return "?";
}

// Twice continuously differentiable ReLU with blend width d:
//   0 for x <= 0, x^3/d^2 - x^4/(2 d^3) on [0, d], x - d/2 for x > d.
inline double smoothed_relu_value(double x, double d) {
  if (x <= 0.0) return 0.0;
  if (x >= d) return x - 0.5 * d;
  const double x3 = x * x * x;
  return x3 / (d * d) - x3 * x / (2.0 * d * d * d);
}

inline double smoothed_relu_slope(double x, double d) {
  if (x <= 0.0) return 0.0;
  if (x >= d) return 1.0;
  const double x2 = x * x;
  return 3.0 * x2 / (d * d) - 2.0 * x2 * x / (d * d * d);
}

inline double smoothed_relu_curvature(double x, double d) {
  if (x <= 0.0 || x >= d) return 0.0;
  return 6.0 * x / (d * d) - 6.0 * x * x / (d * d * d);
}

inline double sigmoid_value(double x) {
  // Split branches keep exp() from overflowing for large |x|.
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

class Tape;

class Var {
public:
  Var() = default;
  Var(Tape* tape, std::uint32_t index) : tape_(tape), index_(index) {}

  const Matrix& value() const;
  double scalar() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Index size() const { return value().size(); }
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::uint32_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

private:
  Tape* tape_ = nullptr;
  std::uint32_t index_ = 0;
};

class Gradients;

class Tape {
public:
  struct Node {
    Op op;
    bool requires_grad;
    Matrix value;
    std::vector<std::uint32_t> args;
    double param = 0.0;
    Index offset = 0;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  /// Differentiable input (a parameter tensor).
  Var leaf(Matrix value) { return push(Op::leaf, true, std::move(value), {}); }

  /// Non-differentiable input.
  Var constant(Matrix value) { return push(Op::constant, false, std::move(value), {}); }

  Var constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

  Var record(Op op, std::span<const Var> operands, double param = 0.0, Index offset = 0, Index length = 0);

  Gradients backward(Var output) const;

  /// Recomputes every node from its operands; true when all values match bitwise.
  bool replay_matches() const;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::uint32_t i) const { return nodes_[i]; }
  void reserve(std::size_t n) { nodes_.reserve(n); }

private:
  friend class Var;

  Var push(Op op, bool requires_grad, Matrix value, std::vector<std::uint32_t> args, double param = 0.0,
           Index offset = 0) {
    nodes_.push_back(Node{op, requires_grad, std::move(value), std::move(args), param, offset});
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  Matrix forward(Op op, const std::vector<std::uint32_t>& args, double param, Index offset, Index length) const;
  void check_shapes(Op op, std::span<const Var> operands, Index offset, Index length) const;

  std::vector<Node> nodes_;
};

/// Adjoints of every node reachable from a scalar output.
class Gradients {
public:
  Gradients(const Tape* tape, std::vector<Matrix> adjoints) : tape_(tape), adjoints_(std::move(adjoints)) {}

  /// Adjoint of `v`; a zero array of v's shape when v did not influence the output.
  Matrix operator[](Var v) const {
    if (v.tape() != tape_) throw ContractViolation("gradient requested for a Var of another tape");
    const Matrix& a = adjoints_[v.index()];
    if (a.size() == 0) return Matrix::Zero(v.rows(), v.cols());
    return a;
  }

private:
  const Tape* tape_;
  std::vector<Matrix> adjoints_;
};

inline const Matrix& Var::value() const { return tape_->nodes_[index_].value; }
inline double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ContractViolation("scalar() on a non-scalar Var");
  return v(0, 0);
}
inline bool Var::requires_grad() const { return tape_->nodes_[index_].requires_grad; }

inline void Tape::check_shapes(Op op, std::span<const Var> operands, Index offset, Index length) const {
  auto fail = [op](const std::string& why) {
    throw ContractViolation(std::string(op_name(op)) + ": " + why);
  };
  auto need = [&](std::size_t n) {
    if (operands.size() != n) fail("expected " + std::to_string(n) + " operands");
  };
  for (const Var& v : operands) {
    if (v.tape() != this) fail("operand belongs to a different tape");
  }
  auto shape = [&](std::size_t i) -> const Matrix& { return nodes_[operands[i].index()].value; };
  switch (op) {
  case Op::add:
  case Op::sub:
  case Op::mul: {
    need(2);
    const Matrix& a = nodes_[operands[0].index()].value;
    const Matrix& b = nodes_[operands[1].index()].value;
    if (a.rows() != b.rows() || a.cols() != b.cols()) fail("elementwise shapes differ");
    break;
  }
  case Op::matmul: {
    need(2);
    if (shape(0).cols() != shape(1).rows()) fail("inner dimensions do not match");
    break;
  }
  case Op::matvec: {
    need(2);
    const Matrix& a = nodes_[operands[0].index()].value;
    const Matrix& x = nodes_[operands[1].index()].value;
    if (x.cols() != 1) fail("right operand is not a column vector");
    if (a.cols() != x.rows()) fail("inner dimensions do not match");
    break;
  }
  case Op::dot: {
    need(2);
    const Matrix& a = nodes_[operands[0].index()].value;
    const Matrix& b = nodes_[operands[1].index()].value;
    if (a.size() != b.size() || a.cols() != 1 || b.cols() != 1) fail("operands must be equal-length vectors");
    break;
  }
  case Op::max_of: {
    if (operands.empty()) fail("empty operand list");
    for (const Var& v : operands) {
      if (nodes_[v.index()].value.size() != 1) fail("operands must be scalars");
    }
    break;
  }
  case Op::concat: {
    if (operands.empty()) fail("empty operand list");
    for (const Var& v : operands) {
      if (nodes_[v.index()].value.cols() != 1) fail("operands must be column vectors");
    }
    break;
  }
  case Op::slice: {
    need(1);
    const Matrix& a = nodes_[operands[0].index()].value;
    if (a.cols() != 1) fail("operand must be a column vector");
    if (offset < 0 || length < 0 || offset + length > a.rows()) fail("range out of bounds");
    break;
  }
  case Op::leaf:
  case Op::constant: fail("inputs are created with leaf()/constant()"); break;
  default: need(1); break;
  }
}

inline Matrix Tape::forward(Op op, const std::vector<std::uint32_t>& args, double param, Index offset,
                            Index length) const {
  auto in = [&](std::size_t i) -> const Matrix& { return nodes_[args[i]].value; };
  switch (op) {
  case Op::add: return in(0) + in(1);
  case Op::sub: return in(0) - in(1);
  case Op::scale: return param * in(0);
  case Op::mul: return in(0).cwiseProduct(in(1));
  case Op::matmul: return in(0) * in(1);
  case Op::matvec: return in(0) * in(1);
  case Op::dot: return Matrix::Constant(1, 1, in(0).col(0).dot(in(1).col(0)));
  case Op::sum: return Matrix::Constant(1, 1, in(0).sum());
  case Op::sqnorm: return Matrix::Constant(1, 1, in(0).squaredNorm());
  case Op::exp: return in(0).array().exp().matrix();
  case Op::log: return in(0).array().log().matrix();
  case Op::sin: return in(0).array().sin().matrix();
  case Op::cos: return in(0).array().cos().matrix();
  case Op::sigmoid: return in(0).unaryExpr([](double x) { return sigmoid_value(x); });
  case Op::relu: return in(0).cwiseMax(0.0);
  case Op::smoothed_relu: return in(0).unaryExpr([param](double x) { return smoothed_relu_value(x, param); });
  case Op::max_of: {
    double best = in(0)(0, 0);
    for (std::size_t i = 1; i < args.size(); ++i) best = std::max(best, in(i)(0, 0));
    return Matrix::Constant(1, 1, best);
  }
  case Op::stop_gradient: return in(0);
  case Op::concat: {
    Index total = 0;
    for (std::size_t i = 0; i < args.size(); ++i) total += in(i).rows();
    Matrix out(total, 1);
    Index row = 0;
    for (std::size_t i = 0; i < args.size(); ++i) {
      out.middleRows(row, in(i).rows()) = in(i);
      row += in(i).rows();
    }
    return out;
  }
  case Op::slice: return in(0).middleRows(offset, length);
  case Op::leaf:
  case Op::constant: break;
  }
  throw ContractViolation("forward: unsupported op");
}

inline Var Tape::record(Op op, std::span<const Var> operands, double param, Index offset, Index length) {
  check_shapes(op, operands, offset, length);
  if (op == Op::smoothed_relu && !(param > 0.0)) throw ConfigError("smoothed_relu: width d must be positive");
  std::vector<std::uint32_t> args;
  args.reserve(operands.size());
  bool grad = false;
  for (const Var& v : operands) {
    args.push_back(v.index());
    grad = grad || nodes_[v.index()].requires_grad;
  }
  if (op == Op::stop_gradient) grad = false;
  Matrix value = forward(op, args, param, offset, length);
  return push(op, grad, std::move(value), std::move(args), param, offset);
}

inline bool Tape::replay_matches() const {
  for (const Node& n : nodes_) {
    if (n.op == Op::leaf || n.op == Op::constant) continue;
    const Index length = n.op == Op::slice ? n.value.rows() : 0;
    Matrix again = forward(n.op, n.args, n.param, n.offset, length);
    if (again.rows() != n.value.rows() || again.cols() != n.value.cols()) return false;
    for (Index i = 0; i < again.size(); ++i) {
      const double a = again.data()[i];
      const double b = n.value.data()[i];
      if (!(a == b) && !(std::isnan(a) && std::isnan(b))) return false;
    }
  }
  return true;
}

inline Gradients Tape::backward(Var output) const {
  if (output.tape() != this) throw ContractViolation("backward: output belongs to a different tape");
  if (output.size() != 1) throw ContractViolation("backward: output must be a scalar");
  std::vector<Matrix> adj(nodes_.size());
  adj[output.index()] = Matrix::Ones(1, 1);

  auto accumulate = [&](std::uint32_t target, const auto& contribution) {
    if (!nodes_[target].requires_grad) return;
    Matrix& a = adj[target];
    if (a.size() == 0) {
      a = contribution;
    } else {
      a += contribution;
    }
  };

  auto slot = [&](std::uint32_t target) -> Matrix& {
    Matrix& a = adj[target];
    if (a.size() == 0) a = Matrix::Zero(nodes_[target].value.rows(), nodes_[target].value.cols());
    return a;
  };

  for (std::size_t k = nodes_.size(); k-- > 0;) {
    const Node& n = nodes_[k];
    if (!n.requires_grad || adj[k].size() == 0) continue;
    const Matrix& g = adj[k];
    auto in = [&](std::size_t i) -> const Matrix& { return nodes_[n.args[i]].value; };
    switch (n.op) {
    case Op::leaf:
    case Op::constant:
    case Op::stop_gradient: break;
    case Op::add:
      accumulate(n.args[0], g);
      accumulate(n.args[1], g);
      break;
    case Op::sub:
      accumulate(n.args[0], g);
      accumulate(n.args[1], Matrix(-g));
      break;
    case Op::scale: accumulate(n.args[0], Matrix(n.param * g)); break;
    case Op::mul:
      accumulate(n.args[0], Matrix(g.cwiseProduct(in(1))));
      accumulate(n.args[1], Matrix(g.cwiseProduct(in(0))));
      break;
    case Op::matmul:
    case Op::matvec:
      if (nodes_[n.args[0]].requires_grad) slot(n.args[0]).noalias() += g * in(1).transpose();
      if (nodes_[n.args[1]].requires_grad) slot(n.args[1]).noalias() += in(0).transpose() * g;
      break;
    case Op::dot: {
      const double s = g(0, 0);
      accumulate(n.args[0], Matrix(s * in(1)));
      accumulate(n.args[1], Matrix(s * in(0)));
      break;
    }
    case Op::sum: accumulate(n.args[0], Matrix::Constant(in(0).rows(), in(0).cols(), g(0, 0))); break;
    case Op::sqnorm: accumulate(n.args[0], Matrix(2.0 * g(0, 0) * in(0))); break;
    case Op::exp: accumulate(n.args[0], Matrix(g.cwiseProduct(n.value))); break;
    case Op::log: accumulate(n.args[0], Matrix(g.cwiseQuotient(in(0)))); break;
    case Op::sin: accumulate(n.args[0], Matrix(g.cwiseProduct(Matrix(in(0).array().cos().matrix())))); break;
    case Op::cos: accumulate(n.args[0], Matrix(-g.cwiseProduct(Matrix(in(0).array().sin().matrix())))); break;
    case Op::sigmoid: {
      Matrix local = n.value.unaryExpr([](double s) { return s * (1.0 - s); });
      accumulate(n.args[0], Matrix(g.cwiseProduct(local)));
      break;
    }
    case Op::relu: {
      Matrix local = in(0).unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
      accumulate(n.args[0], Matrix(g.cwiseProduct(local)));
      break;
    }
    case Op::smoothed_relu: {
      const double d = n.param;
      Matrix local = in(0).unaryExpr([d](double x) { return smoothed_relu_slope(x, d); });
      accumulate(n.args[0], Matrix(g.cwiseProduct(local)));
      break;
    }
    case Op::max_of: {
      // Exact ties send the whole adjoint to the first maximal operand.
      std::size_t best = 0;
      for (std::size_t i = 1; i < n.args.size(); ++i) {
        if (in(i)(0, 0) > in(best)(0, 0)) best = i;
      }
      accumulate(n.args[best], g);
      break;
    }
    case Op::concat: {
      Index row = 0;
      for (std::size_t i = 0; i < n.args.size(); ++i) {
        const Index len = in(i).rows();
        accumulate(n.args[i], Matrix(g.middleRows(row, len)));
        row += len;
      }
      break;
    }
    case Op::slice: {
      Matrix full = Matrix::Zero(in(0).rows(), 1);
      full.middleRows(n.offset, g.rows()) = g;
      accumulate(n.args[0], full);
      break;
    }
    }
  }
  return Gradients(this, std::move(adj));
}

// ---------------------------------------------------------------------------
// Primitive front-ends.

namespace detail {
inline Var record1(Op op, Var a, double param = 0.0) {
  const Var ops[] = {a};
  return a.tape()->record(op, ops, param);
}
inline Var record2(Op op, Var a, Var b) {
  const Var ops[] = {a, b};
  return a.tape()->record(op, ops);
}
} // namespace detail

inline Var add(Var a, Var b) { return detail::record2(Op::add, a, b); }
inline Var sub(Var a, Var b) { return detail::record2(Op::sub, a, b); }
inline Var scale(double c, Var a) { return detail::record1(Op::scale, a, c); }
inline Var mul(Var a, Var b) { return detail::record2(Op::mul, a, b); }
inline Var matmul(Var a, Var b) { return detail::record2(Op::matmul, a, b); }
inline Var matvec(Var a, Var x) { return detail::record2(Op::matvec, a, x); }
inline Var dot(Var a, Var b) { return detail::record2(Op::dot, a, b); }
inline Var sum(Var a) { return detail::record1(Op::sum, a); }
inline Var sqnorm(Var a) { return detail::record1(Op::sqnorm, a); }
inline Var exp(Var a) { return detail::record1(Op::exp, a); }
inline Var log(Var a) { return detail::record1(Op::log, a); }
inline Var sin(Var a) { return detail::record1(Op::sin, a); }
inline Var cos(Var a) { return detail::record1(Op::cos, a); }
inline Var sigmoid(Var a) { return detail::record1(Op::sigmoid, a); }
inline Var relu(Var a) { return detail::record1(Op::relu, a); }
inline Var smoothed_relu(Var a, double d) { return detail::record1(Op::smoothed_relu, a, d); }
inline Var stop_gradient(Var a) { return detail::record1(Op::stop_gradient, a); }

inline Var max_of(std::span<const Var> items) {
  if (items.empty()) throw ContractViolation("max_of: empty operand list");
  return items.front().tape()->record(Op::max_of, items);
}

inline Var concat(std::span<const Var> items) {
  if (items.empty()) throw ContractViolation("concat: empty operand list");
  return items.front().tape()->record(Op::concat, items);
}

inline Var slice(Var a, Index offset, Index length) {
  const Var ops[] = {a};
  return a.tape()->record(Op::slice, ops, 0.0, offset, length);
}

// Composites.

/// x * sigmoid(x), elementwise.
inline Var swish(Var a) { return mul(a, sigmoid(a)); }

/// a + c (elementwise, c broadcast as a constant).
inline Var shift(Var a, double c) {
  return add(a, a.tape()->constant(Matrix::Constant(a.rows(), a.cols(), c)));
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator-(Var a) { return scale(-1.0, a); }
inline Var operator*(double c, Var a) { return scale(c, a); }

} // namespace stable_ndde::ad

#endif // STABLE_NDDE_TENSOR_AD_HPP
