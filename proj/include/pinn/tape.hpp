#pragma once

#include <Eigen/Dense>

#include <cassert>
#include <cstdint>
#include <stdexcept>
#include <vector>

// Reverse-mode automatic differentiation over a tape of matrix-valued
// operations. Scalars are 1x1 matrices; batched network evaluations record a
// handful of large nodes instead of one node per arithmetic operation, which
// is what makes full-scale training affordable.
//
// The tape is append-only: an operation may only reference nodes that already
// exist, so the node order is a topological order and the graph cannot contain
// cycles. backward() sweeps the nodes once in reverse order.

namespace pinn::ad {

using Mat = Eigen::MatrixXd;

enum class Op : std::uint8_t {
  Leaf,       // trainable parameter
  Constant,   // non-differentiable input
  Add,        // a + b, same shape
  Sub,        // a - b
  CMul,       // elementwise a * b
  MatMul,     // a * b (matrix product)
  AddCol,     // a + b broadcast across columns (b is a column vector)
  Sigmoid,    // elementwise logistic
  Softplus,   // elementwise log(1 + e^x)
  Exp,        // elementwise
  AddK,       // a + k
  MulK,       // a * k
  MulScalar,  // a(0,0) * b, a is 1x1
  Sum,        // 1x1 = sum of all entries
  SumSq,      // 1x1 = sum of squared entries
  Row,        // single row view, index in k
  Cols        // column gather, indices in idx
};

struct Node {
  Op op;
  std::int32_t a = -1;
  std::int32_t b = -1;
  double k = 0.0;
  std::vector<std::int32_t> idx;  // Cols only
  Mat val;
  Mat grad;  // empty until touched by backward
};

namespace detail {

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus_scalar(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace detail

class Tape {
 public:
  using Ref = std::int32_t;

  Ref leaf(Mat value) { return push(Op::Leaf, -1, -1, std::move(value)); }

  Ref constant(Mat value) { return push(Op::Constant, -1, -1, std::move(value)); }

  Ref scalar_leaf(double v) { return leaf(Mat::Constant(1, 1, v)); }
  Ref scalar_constant(double v) { return constant(Mat::Constant(1, 1, v)); }

  Ref add(Ref a, Ref b) {
    check_same_shape(a, b);
    return push(Op::Add, a, b, val(a) + val(b));
  }

  Ref sub(Ref a, Ref b) {
    check_same_shape(a, b);
    return push(Op::Sub, a, b, val(a) - val(b));
  }

  Ref cmul(Ref a, Ref b) {
    check_same_shape(a, b);
    return push(Op::CMul, a, b, val(a).cwiseProduct(val(b)));
  }

  Ref matmul(Ref a, Ref b) {
    if (val(a).cols() != val(b).rows())
      throw std::invalid_argument("tape: matmul inner dimensions disagree");
    Mat out(val(a).rows(), val(b).cols());
    out.noalias() = val(a) * val(b);
    return push(Op::MatMul, a, b, std::move(out));
  }

  // a + column vector b, broadcast over the columns of a
  Ref add_col(Ref a, Ref b) {
    if (val(b).cols() != 1 || val(a).rows() != val(b).rows())
      throw std::invalid_argument("tape: add_col needs a column vector of matching rows");
    return push(Op::AddCol, a, b, val(a).colwise() + Eigen::VectorXd(val(b).col(0)));
  }

  Ref sigmoid(Ref a) {
    return push(Op::Sigmoid, a, -1, val(a).unaryExpr([](double x) { return detail::sigmoid_scalar(x); }));
  }

  Ref softplus(Ref a) {
    return push(Op::Softplus, a, -1, val(a).unaryExpr([](double x) { return detail::softplus_scalar(x); }));
  }

  Ref exp(Ref a) { return push(Op::Exp, a, -1, val(a).array().exp().matrix()); }

  Ref add_k(Ref a, double k) { return push(Op::AddK, a, -1, val(a).array() + k, k); }

  Ref mul_k(Ref a, double k) { return push(Op::MulK, a, -1, val(a) * k, k); }

  Ref neg(Ref a) { return mul_k(a, -1.0); }

  // broadcast multiply by a 1x1 node
  Ref mul_scalar(Ref s, Ref a) {
    if (val(s).size() != 1) throw std::invalid_argument("tape: mul_scalar needs a 1x1 first argument");
    return push(Op::MulScalar, s, a, val(s)(0, 0) * val(a));
  }

  Ref sum(Ref a) { return push(Op::Sum, a, -1, Mat::Constant(1, 1, val(a).sum())); }

  Ref sum_sq(Ref a) { return push(Op::SumSq, a, -1, Mat::Constant(1, 1, val(a).squaredNorm())); }

  Ref row(Ref a, int r) {
    if (r < 0 || r >= val(a).rows()) throw std::invalid_argument("tape: row index out of range");
    return push(Op::Row, a, -1, val(a).row(r), static_cast<double>(r));
  }

  Ref cols(Ref a, std::vector<std::int32_t> indices) {
    Mat out(val(a).rows(), static_cast<Eigen::Index>(indices.size()));
    for (std::size_t j = 0; j < indices.size(); ++j) {
      if (indices[j] < 0 || indices[j] >= val(a).cols())
        throw std::invalid_argument("tape: cols index out of range");
      out.col(static_cast<Eigen::Index>(j)) = val(a).col(indices[j]);
    }
    Ref r = push(Op::Cols, a, -1, std::move(out));
    nodes_[static_cast<std::size_t>(r)].idx = std::move(indices);
    return r;
  }

  const Mat& val(Ref r) const { return nodes_[check(r)].val; }

  // Gradient of the last backward() root with respect to node r; zero for
  // nodes the root does not depend on.
  Mat grad(Ref r) const {
    const Node& n = nodes_[check(r)];
    if (n.grad.size() == 0) return Mat::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }

  // Zero-copy view of the stored adjoint; 0x0 when the node was not reached
  // by the last backward pass (optimizer treats that as a zero gradient).
  const Mat& grad_raw(Ref r) const { return nodes_[check(r)].grad; }

  // In-place access to a leaf's value (optimizer updates between epochs).
  Mat& leaf_value(Ref r) {
    Node& n = nodes_[check(r)];
    if (n.op != Op::Leaf && n.op != Op::Constant)
      throw std::invalid_argument("tape: leaf_value on a derived node");
    return n.val;
  }

  std::size_t size() const { return nodes_.size(); }

  // Checkpointing: everything recorded after mark() is discarded by reset().
  std::size_t mark() const { return nodes_.size(); }
  void reset(std::size_t m) {
    assert(m <= nodes_.size());
    nodes_.resize(m);
  }

  void zero_grad() {
    for (Node& n : nodes_) n.grad.resize(0, 0);
  }

  // Reverse sweep from a scalar root. Each node is visited exactly once, in
  // reverse topological (= reverse append) order.
  void backward(Ref root) {
    Node& out = nodes_[check(root)];
    if (out.val.size() != 1) throw std::invalid_argument("tape: backward root must be scalar");
    zero_grad();
    visits_ = 0;
    out.grad = Mat::Constant(1, 1, 1.0);
    for (std::int32_t i = root; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.size() == 0) continue;  // root does not depend on this node
      ++visits_;
      propagate(n);
    }
  }

  // Nodes processed by the most recent backward(); used to check the
  // linear-time traversal property.
  std::uint64_t backward_visits() const { return visits_; }

 private:
  std::vector<Node> nodes_;
  std::uint64_t visits_ = 0;

  std::size_t check(Ref r) const {
    if (r < 0 || static_cast<std::size_t>(r) >= nodes_.size())
      throw std::out_of_range("tape: bad node reference");
    return static_cast<std::size_t>(r);
  }

  void check_same_shape(Ref a, Ref b) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw std::invalid_argument("tape: operand shapes disagree");
  }

  Ref push(Op op, Ref a, Ref b, Mat value, double k = 0.0) {
    // parents must already be on the tape; this is what rules out cycles
    assert(a < static_cast<Ref>(nodes_.size()));
    assert(b < static_cast<Ref>(nodes_.size()));
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.k = k;
    n.val = std::move(value);
    nodes_.push_back(std::move(n));
    return static_cast<Ref>(nodes_.size() - 1);
  }

  Mat& ensure_grad(Ref r) {
    Node& n = nodes_[static_cast<std::size_t>(r)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }

  void propagate(Node& n) {
    const Mat& g = n.grad;
    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::Add:
        ensure_grad(n.a) += g;
        ensure_grad(n.b) += g;
        break;
      case Op::Sub:
        ensure_grad(n.a) += g;
        ensure_grad(n.b) -= g;
        break;
      case Op::CMul:
        ensure_grad(n.a) += g.cwiseProduct(nodes_[n.b].val);
        ensure_grad(n.b) += g.cwiseProduct(nodes_[n.a].val);
        break;
      case Op::MatMul:
        ensure_grad(n.a).noalias() += g * nodes_[n.b].val.transpose();
        ensure_grad(n.b).noalias() += nodes_[n.a].val.transpose() * g;
        break;
      case Op::AddCol:
        ensure_grad(n.a) += g;
        ensure_grad(n.b) += g.rowwise().sum();
        break;
      case Op::Sigmoid:
        // s' = s (1 - s), s is this node's value
        ensure_grad(n.a).array() += g.array() * n.val.array() * (1.0 - n.val.array());
        break;
      case Op::Softplus:
        ensure_grad(n.a).array() +=
            g.array() * nodes_[n.a].val.unaryExpr([](double x) { return detail::sigmoid_scalar(x); }).array();
        break;
      case Op::Exp:
        ensure_grad(n.a).array() += g.array() * n.val.array();
        break;
      case Op::AddK:
        ensure_grad(n.a) += g;
        break;
      case Op::MulK:
        ensure_grad(n.a) += g * n.k;
        break;
      case Op::MulScalar:
        ensure_grad(n.a)(0, 0) += g.cwiseProduct(nodes_[n.b].val).sum();
        ensure_grad(n.b) += g * nodes_[n.a].val(0, 0);
        break;
      case Op::Sum:
        ensure_grad(n.a).array() += g(0, 0);
        break;
      case Op::SumSq:
        ensure_grad(n.a) += 2.0 * g(0, 0) * nodes_[n.a].val;
        break;
      case Op::Row:
        ensure_grad(n.a).row(static_cast<Eigen::Index>(n.k)) += g;
        break;
      case Op::Cols: {
        Mat& ga = ensure_grad(n.a);
        for (std::size_t j = 0; j < n.idx.size(); ++j)
          ga.col(n.idx[j]) += g.col(static_cast<Eigen::Index>(j));
        break;
      }
    }
  }
};

// Scalar convenience handle used in tests and for small expressions. All the
// heavy lifting happens through the matrix API above.
class Var {
 public:
  Var() : tape_(nullptr), id_(-1) {}
  Var(Tape& tape, Tape::Ref id) : tape_(&tape), id_(id) {}

  static Var leaf(Tape& tape, double v) { return Var(tape, tape.scalar_leaf(v)); }
  static Var constant(Tape& tape, double v) { return Var(tape, tape.scalar_constant(v)); }

  double value() const { return tape_->val(id_)(0, 0); }
  double grad() const { return tape_->grad(id_)(0, 0); }
  Tape::Ref ref() const { return id_; }
  Tape& tape() const { return *tape_; }

  friend Var operator+(Var a, Var b) { return Var(*a.tape_, a.tape_->add(a.id_, b.id_)); }
  friend Var operator-(Var a, Var b) { return Var(*a.tape_, a.tape_->sub(a.id_, b.id_)); }
  friend Var operator*(Var a, Var b) { return Var(*a.tape_, a.tape_->cmul(a.id_, b.id_)); }
  friend Var operator+(Var a, double k) { return Var(*a.tape_, a.tape_->add_k(a.id_, k)); }
  friend Var operator*(Var a, double k) { return Var(*a.tape_, a.tape_->mul_k(a.id_, k)); }
  friend Var operator*(double k, Var a) { return a * k; }
  friend Var operator-(Var a) { return a * -1.0; }

 private:
  Tape* tape_;
  Tape::Ref id_;
};

inline Var exp(Var a) { return Var(a.tape(), a.tape().exp(a.ref())); }
inline Var sigmoid(Var a) { return Var(a.tape(), a.tape().sigmoid(a.ref())); }
inline Var softplus(Var a) { return Var(a.tape(), a.tape().softplus(a.ref())); }
inline Var silu(Var a) { return a * sigmoid(a); }

// silu(x) for a matrix node
inline Tape::Ref silu(Tape& t, Tape::Ref x) { return t.cmul(x, t.sigmoid(x)); }

// d silu/dx = s + x s (1 - s), built from primitives so that gradients keep
// flowing through it when the result feeds later computations
inline Tape::Ref silu_prime(Tape& t, Tape::Ref x) {
  Tape::Ref s = t.sigmoid(x);
  Tape::Ref xs = t.cmul(x, s);
  return t.add(s, t.sub(xs, t.cmul(xs, s)));
}

}  // namespace pinn::ad
