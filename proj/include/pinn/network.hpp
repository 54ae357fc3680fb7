#pragma once

#include <pinn/rng.hpp>
#include <pinn/tape.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

// Feedforward surrogates: SiLU hidden layers, Softplus output (so every
// component of the prediction is strictly positive), plus the softplus
// reparameterization used for trainable positive scalars.

namespace pinn {

struct NetworkConfig {
  std::vector<int> hidden;  // e.g. {100, 100, 100}
  int in_dim = 1;
  int out_dim = 1;
  std::string hidden_activation = "silu";
  std::string output_activation = "softplus";
  std::string init_scheme = "uniform_fan_in";

  void validate() const {
    if (in_dim <= 0 || out_dim <= 0)
      throw std::invalid_argument("network config: in/out dimensions must be positive");
    for (int h : hidden)
      if (h <= 0) throw std::invalid_argument("network config: zero-size hidden layer");
    if (hidden_activation != "silu")
      throw std::invalid_argument("network config: unsupported hidden activation '" +
                                  hidden_activation + "'");
    if (output_activation != "softplus")
      throw std::invalid_argument("network config: unsupported output activation '" +
                                  output_activation + "'");
    if (init_scheme != "uniform_fan_in")
      throw std::invalid_argument("network config: unsupported init scheme '" + init_scheme + "'");
  }

  std::vector<int> dims() const {
    std::vector<int> d;
    d.push_back(in_dim);
    d.insert(d.end(), hidden.begin(), hidden.end());
    d.push_back(out_dim);
    return d;
  }
};

// A positive scalar parameter: value = softplus(raw), raw unconstrained.
struct TrainableScalar {
  double raw = 0.0;

  static TrainableScalar from_value(double v) {
    if (!(v > 0.0))
      throw std::invalid_argument("trainable scalar: target value must be positive");
    // softplus inverse: raw = log(e^v - 1), stable for large v
    TrainableScalar s;
    s.raw = v > 30.0 ? v : std::log(std::expm1(v));
    return s;
  }

  double value() const { return ad::detail::softplus_scalar(raw); }
};

// Tape references for one network's parameters, in the fixed order
// W_0, b_0, W_1, b_1, ... used everywhere (flattening, checkpoints, Adam).
struct TapedNet {
  std::vector<ad::Tape::Ref> weights;  // alternating W_k, b_k
  std::vector<int> dims;
};

class Network {
 public:
  Network() = default;

  Network(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    const std::vector<int> d = cfg.dims();
    Rng rng(seed);
    for (std::size_t k = 0; k + 1 < d.size(); ++k) {
      const int fan_in = d[k];
      const int fan_out = d[k + 1];
      const double bound = std::sqrt(1.0 / fan_in);
      Eigen::MatrixXd W(fan_out, fan_in);
      for (int i = 0; i < fan_out; ++i)       // row-major draw order, fixed
        for (int j = 0; j < fan_in; ++j) W(i, j) = rng.uniform(-bound, bound);
      W_.push_back(std::move(W));
      b_.push_back(Eigen::VectorXd::Zero(fan_out));
    }
  }

  const NetworkConfig& config() const { return cfg_; }
  std::size_t layer_count() const { return W_.size(); }
  const Eigen::MatrixXd& weight(std::size_t k) const { return W_[k]; }
  const Eigen::VectorXd& bias(std::size_t k) const { return b_[k]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < W_.size(); ++k)
      n += static_cast<std::size_t>(W_[k].size()) + static_cast<std::size_t>(b_[k].size());
    return n;
  }

  // Plain batched evaluation: inputs are columns of a (in_dim x N) matrix.
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd z = x;
    for (std::size_t k = 0; k < W_.size(); ++k) {
      z = (W_[k] * z).colwise() + b_[k];
      if (!z.allFinite())
        throw std::runtime_error("network forward: non-finite value in layer " + std::to_string(k));
      if (k + 1 < W_.size())
        z = z.unaryExpr([](double v) { return v * ad::detail::sigmoid_scalar(v); });
      else
        z = z.unaryExpr([](double v) { return ad::detail::softplus_scalar(v); });
    }
    return z;
  }

  Eigen::VectorXd forward(double t) const {
    return forward_batch(Eigen::MatrixXd::Constant(cfg_.in_dim, 1, t)).col(0);
  }

  struct DualBatch {
    Eigen::MatrixXd value;    // out_dim x N
    Eigen::MatrixXd tangent;  // d(value)/d(scalar input), out_dim x N
  };

  // Tape-free version of the dual forward pass (value + time derivative),
  // used for reporting and as a cross-check of the taped evaluation.
  DualBatch forward_batch_dual(const Eigen::MatrixXd& x) const {
    if (cfg_.in_dim != 1)
      throw std::invalid_argument("dual forward: input dimension must be 1");
    Eigen::MatrixXd z = x;
    Eigen::MatrixXd dz = Eigen::MatrixXd::Ones(1, x.cols());
    for (std::size_t k = 0; k < W_.size(); ++k) {
      z = (W_[k] * z).colwise() + b_[k];
      dz = W_[k] * dz;
      if (!z.allFinite())
        throw std::runtime_error("network forward: non-finite value in layer " + std::to_string(k));
      if (k + 1 < W_.size()) {
        const Eigen::MatrixXd s = z.unaryExpr([](double v) { return ad::detail::sigmoid_scalar(v); });
        dz.array() *= s.array() * (1.0 + z.array() * (1.0 - s.array()));  // silu'
        z.array() *= s.array();
      } else {
        dz.array() *= z.unaryExpr([](double v) { return ad::detail::sigmoid_scalar(v); }).array();
        z = z.unaryExpr([](double v) { return ad::detail::softplus_scalar(v); });
      }
    }
    return {std::move(z), std::move(dz)};
  }

  // Flat parameter vector in W_0, b_0, W_1, b_1, ... order; matrices stored
  // row by row to match the draw order of initialization.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (std::size_t k = 0; k < W_.size(); ++k) {
      for (Eigen::Index i = 0; i < W_[k].rows(); ++i)
        for (Eigen::Index j = 0; j < W_[k].cols(); ++j) out.push_back(W_[k](i, j));
      for (Eigen::Index i = 0; i < b_[k].size(); ++i) out.push_back(b_[k](i));
    }
    return out;
  }

  void unflatten(const std::vector<double>& flat) {
    if (flat.size() != parameter_count())
      throw std::invalid_argument("network: flat vector length " + std::to_string(flat.size()) +
                                  " does not match parameter count " +
                                  std::to_string(parameter_count()));
    std::size_t p = 0;
    for (std::size_t k = 0; k < W_.size(); ++k) {
      for (Eigen::Index i = 0; i < W_[k].rows(); ++i)
        for (Eigen::Index j = 0; j < W_[k].cols(); ++j) W_[k](i, j) = flat[p++];
      for (Eigen::Index i = 0; i < b_[k].size(); ++i) b_[k](i) = flat[p++];
    }
  }

  // Record every W_k and b_k as leaves on the tape (done once, before the
  // training checkpoint, so the refs stay valid across epoch resets).
  TapedNet register_on(ad::Tape& tape) const {
    TapedNet tn;
    tn.dims = cfg_.dims();
    for (std::size_t k = 0; k < W_.size(); ++k) {
      tn.weights.push_back(tape.leaf(W_[k]));
      tn.weights.push_back(tape.leaf(b_[k]));
    }
    return tn;
  }

  // Copy trained leaf values back from the tape.
  void read_back(const ad::Tape& tape, const TapedNet& tn) {
    for (std::size_t k = 0; k < W_.size(); ++k) {
      W_[k] = tape.val(tn.weights[2 * k]);
      b_[k] = tape.val(tn.weights[2 * k + 1]);
    }
  }

 private:
  NetworkConfig cfg_;
  std::vector<Eigen::MatrixXd> W_;
  std::vector<Eigen::VectorXd> b_;
};

// Taped batched forward pass. x is an (in_dim x N) node; the result is the
// (out_dim x N) node of network outputs.
inline ad::Tape::Ref taped_forward(ad::Tape& t, const TapedNet& net, ad::Tape::Ref x) {
  const std::size_t layers = net.weights.size() / 2;
  ad::Tape::Ref z = x;
  for (std::size_t k = 0; k < layers; ++k) {
    z = t.add_col(t.matmul(net.weights[2 * k], z), net.weights[2 * k + 1]);
    z = k + 1 < layers ? ad::silu(t, z) : t.softplus(z);
  }
  return z;
}

struct DualForward {
  ad::Tape::Ref value;    // network output, out_dim x N
  ad::Tape::Ref tangent;  // d(output)/d(input scalar), out_dim x N
};

// Forward pass carrying the tangent with respect to the scalar input
// (normalized time). The tangent is recorded with ordinary tape operations,
// so backpropagating any function of it also reaches the weights — this is
// the forward-over-reverse pattern that gives d(loss)/d(weights) when the
// loss contains du/dt.
inline DualForward taped_forward_dual(ad::Tape& t, const TapedNet& net, ad::Tape::Ref x) {
  const std::size_t layers = net.weights.size() / 2;
  if (net.dims.front() != 1)
    throw std::invalid_argument("dual forward: input dimension must be 1");
  ad::Tape::Ref z = x;
  ad::Tape::Ref dz = t.constant(ad::Mat::Ones(1, t.val(x).cols()));
  for (std::size_t k = 0; k < layers; ++k) {
    ad::Tape::Ref W = net.weights[2 * k];
    z = t.add_col(t.matmul(W, z), net.weights[2 * k + 1]);
    dz = t.matmul(W, dz);  // bias has zero tangent
    if (k + 1 < layers) {
      dz = t.cmul(ad::silu_prime(t, z), dz);
      z = ad::silu(t, z);
    } else {
      dz = t.cmul(t.sigmoid(z), dz);  // softplus' = sigmoid
      z = t.softplus(z);
    }
  }
  return {z, dz};
}

}  // namespace pinn
