#include "posegen/nn.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace posegen::nn {

Activation parse_activation(const std::string& name) {
  if (name == "silu") return Activation::silu;
  if (name == "tanh") return Activation::tanh;
  if (name == "softplus") return Activation::softplus;
  throw std::invalid_argument("unknown activation: " + name);
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::silu: return "silu";
    case Activation::tanh: return "tanh";
    case Activation::softplus: return "softplus";
  }
  return "?";
}

ad::Var activate(ad::Var x, Activation a) {
  switch (a) {
    case Activation::silu: return ad::silu(x);
    case Activation::tanh: return ad::tanh(x);
    case Activation::softplus: return ad::softplus(x);
  }
  return x;
}

Mlp::Mlp(MlpSpec spec, Rng& rng, double output_gain) : spec_(std::move(spec)) {
  if (spec_.input <= 0 || spec_.output <= 0) throw std::invalid_argument("Mlp: non-positive width");
  int in = spec_.input;
  std::vector<int> widths = spec_.hidden;
  widths.push_back(spec_.output);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const int out = widths[l];
    const bool last = l + 1 == widths.size();
    double stddev = std::sqrt((spec_.activation == Activation::tanh ? 1.0 : 2.0) / in);
    if (last) stddev = std::sqrt(1.0 / in) * output_gain;
    params.add("W" + std::to_string(l), normal_matrix(rng, in, out, stddev));
    params.add("b" + std::to_string(l), Eigen::MatrixXd::Zero(1, out));
    in = out;
  }
}

ad::Var Mlp::forward(ad::Tape& tape, const std::vector<ad::Var>& bound, ad::Var x) const {
  (void)tape;
  if (x.cols() != spec_.input) throw std::invalid_argument("Mlp: input width mismatch");
  const std::size_t layers = bound.size() / 2;
  ad::Var h = x;
  for (std::size_t l = 0; l < layers; ++l) {
    h = ad::add_row(ad::matmul(h, bound[2 * l]), bound[2 * l + 1]);
    if (l + 1 < layers) h = activate(h, spec_.activation);
  }
  return h;
}

Eigen::MatrixXd Mlp::evaluate(const Eigen::MatrixXd& x) const {
  ad::Tape tape;
  auto bound = params.bind(tape, false);
  return forward(tape, bound, tape.constant(x)).value();
}

namespace {

// col: (Ho*Wo) x (C*k*k) patch matrix for one image.
void im2col(const double* img, const ConvShape& s, Eigen::MatrixXd& col) {
  const int ho = s.out_h(), wo = s.out_w(), k = s.kernel;
  col.setZero(ho * wo, s.in_channels * k * k);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const int r = oy * wo + ox;
      for (int c = 0; c < s.in_channels; ++c) {
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * s.stride - s.pad + ky;
          if (iy < 0 || iy >= s.in_h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * s.stride - s.pad + kx;
            if (ix < 0 || ix >= s.in_w) continue;
            col(r, (c * k + ky) * k + kx) = img[(c * s.in_h + iy) * s.in_w + ix];
          }
        }
      }
    }
  }
}

void col2im(const Eigen::MatrixXd& dcol, const ConvShape& s, double* dimg) {
  const int ho = s.out_h(), wo = s.out_w(), k = s.kernel;
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const int r = oy * wo + ox;
      for (int c = 0; c < s.in_channels; ++c) {
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * s.stride - s.pad + ky;
          if (iy < 0 || iy >= s.in_h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * s.stride - s.pad + kx;
            if (ix < 0 || ix >= s.in_w) continue;
            dimg[(c * s.in_h + iy) * s.in_w + ix] += dcol(r, (c * k + ky) * k + kx);
          }
        }
      }
    }
  }
}

}  // namespace

ad::Var conv2d(ad::Var x, ad::Var weight, ad::Var bias, const ConvShape& s) {
  if (x.cols() != s.in_size()) throw std::invalid_argument("conv2d: input size mismatch");
  if (weight.rows() != s.in_channels * s.kernel * s.kernel || weight.cols() != s.out_channels)
    throw std::invalid_argument("conv2d: weight shape mismatch");
  const Eigen::Index batch = x.rows();
  const int positions = s.out_h() * s.out_w();
  // Row-major copies give contiguous per-image access.
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMat xin = x.value();
  Eigen::MatrixXd out(batch, s.out_size());
  auto cols = std::make_shared<std::vector<Eigen::MatrixXd>>(batch);
  const Eigen::MatrixXd& w = weight.value();
  const Eigen::RowVectorXd b = bias.value().row(0);
  for (Eigen::Index i = 0; i < batch; ++i) {
    im2col(xin.row(i).data(), s, (*cols)[i]);
    Eigen::MatrixXd y = (*cols)[i] * w;  // positions x Cout
    y.rowwise() += b;
    // channel-major flatten: out[c*positions + p] = y(p, c)
    out.row(i) = Eigen::Map<const Eigen::RowVectorXd>(y.data(), y.size());
  }
  return x.tape->record(std::move(out), {x, weight, bias},
                        [x, weight, bias, s, cols, positions](ad::Tape& t, const Eigen::MatrixXd& g) {
                          const Eigen::Index batch = g.rows();
                          const Eigen::MatrixXd& w = t.value(weight);
                          Eigen::MatrixXd dw = Eigen::MatrixXd::Zero(w.rows(), w.cols());
                          Eigen::MatrixXd db = Eigen::MatrixXd::Zero(1, w.cols());
                          RowMat dx;
                          const bool need_x = t.requires_grad(x);
                          if (need_x) dx.setZero(batch, s.in_size());
                          for (Eigen::Index i = 0; i < batch; ++i) {
                            Eigen::RowVectorXd gi = g.row(i);
                            Eigen::Map<const Eigen::MatrixXd> gy(gi.data(), positions, s.out_channels);
                            dw.noalias() += (*cols)[i].transpose() * gy;
                            db += gy.colwise().sum();
                            if (need_x) {
                              Eigen::MatrixXd dcol = gy * w.transpose();
                              col2im(dcol, s, dx.row(i).data());
                            }
                          }
                          if (t.requires_grad(weight)) t.accumulate(weight, dw);
                          if (t.requires_grad(bias)) t.accumulate(bias, db);
                          if (need_x) t.accumulate(x, Eigen::MatrixXd(dx));
                        });
}

}  // namespace posegen::nn
