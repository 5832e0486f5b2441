#pragma once

// Small neural-network building blocks on top of the autodiff tape.

#include "posegen/ad.hpp"
#include "posegen/random.hpp"

#include <string>
#include <vector>

namespace posegen::nn {

enum class Activation { silu, tanh, softplus };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);
ad::Var activate(ad::Var x, Activation a);

struct MlpSpec {
  int input = 0;
  std::vector<int> hidden;
  int output = 0;
  Activation activation = Activation::silu;
};

/// Fully connected network, rows are batch elements. No activation on the
/// output layer.
class Mlp {
 public:
  Mlp() = default;
  /// `output_gain` scales the initial weights of the last layer.
  Mlp(MlpSpec spec, Rng& rng, double output_gain = 1.0);

  ad::Var forward(ad::Tape& tape, const std::vector<ad::Var>& bound, ad::Var x) const;
  /// Convenience: bind parameters as constants and run without gradients.
  Eigen::MatrixXd evaluate(const Eigen::MatrixXd& x) const;

  const MlpSpec& spec() const { return spec_; }
  ad::ParamSet params;

 private:
  MlpSpec spec_;
};

struct ConvShape {
  int in_channels = 1;
  int out_channels = 1;
  int in_h = 8;
  int in_w = 8;
  int kernel = 3;
  int stride = 2;
  int pad = 1;

  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  int in_size() const { return in_channels * in_h * in_w; }
  int out_size() const { return out_channels * out_h() * out_w(); }
};

/// 2-D convolution. x: B x (C*H*W) channel-major rows; weight: (C*k*k) x Cout;
/// bias: 1 x Cout. Output: B x (Cout*Ho*Wo).
ad::Var conv2d(ad::Var x, ad::Var weight, ad::Var bias, const ConvShape& shape);

}  // namespace posegen::nn
