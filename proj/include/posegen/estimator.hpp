#pragma once

// Image -> pose regressor and its threshold-clipped training loss.

#include "posegen/ad.hpp"
#include "posegen/nn.hpp"
#include "posegen/renderer.hpp"
#include "posegen/skeleton.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace posegen::estimator {

struct EstimatorSpec {
  int height = 32;
  int width = 32;
  int channels = 1;
  /// Output channels of the stride-2 3x3 convolution blocks.
  std::vector<int> conv_channels = {16, 32, 32, 64};
  std::vector<int> fc_hidden = {128};
  nn::Activation activation = nn::Activation::silu;

  void validate() const;
  int input_size() const { return height * width * channels; }
};

/// Convolution blocks, a fully connected head and pi * tanh squashing.
class Estimator {
 public:
  Estimator() = default;
  Estimator(EstimatorSpec spec, std::uint64_t seed);

  const EstimatorSpec& spec() const { return spec_; }
  ad::ParamSet params;

  /// Centers the initial prediction on a pose (typically the training mean).
  void set_output_center(const Eigen::VectorXd& theta);

  /// images: B x (H*W*C) in Image pixel order. Returns B x 69 poses.
  ad::Var forward(ad::Tape& tape, const std::vector<ad::Var>& bound, ad::Var images) const;
  PoseVector estimate(const render::Image& image) const;
  Eigen::MatrixXd estimate_batch(const Eigen::MatrixXd& images) const;

 private:
  EstimatorSpec spec_;
  std::vector<nn::ConvShape> convs_;
  nn::Mlp head_;
};

/// Image pixels (interleaved HWC) as a channel-major row for the network.
Eigen::RowVectorXd image_row(const render::Image& image);

struct EstimatorLossConfig {
  double d_threshold = 2.0;
  void validate() const;
};

/// w = ||theta - theta_hat||_2; returns w if w < d, else 0.
double clipped_loss(const PoseVector& theta, const PoseVector& theta_hat, const EstimatorLossConfig& cfg);
/// Batch mean of per-sample clipped losses; excluded rows get zero gradient.
ad::Var clipped_loss(ad::Var theta, ad::Var theta_hat, const EstimatorLossConfig& cfg);

struct RenderedSample {
  render::Image image;
  PoseVector theta;
  CameraView k;
  std::string split;
};

struct EstimatorTrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 1e-3;
  EstimatorLossConfig loss;

  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double mean_err = 0.0;       // mean per-sample pose-space L2 error
  double excluded_frac = 0.0;  // share of samples with w >= d
  double mean_loss = 0.0;
};

std::string history_csv(const std::vector<EpochStats>& history);

/// Mini-batch descent on the clipped loss. Per-epoch statistics are gathered
/// from the forward passes of that epoch.
std::vector<EpochStats> train_estimator(Estimator& est, const std::vector<RenderedSample>& data,
                                        const EstimatorTrainConfig& cfg, std::uint64_t seed);

/// Predicted poses for a batch of samples.
std::vector<PoseVector> predict(const Estimator& est, const std::vector<RenderedSample>& data);

}  // namespace posegen::estimator
