#pragma once

// 3D pose evaluation metrics. Inputs are in meters, reports in millimeters.

#include "posegen/skeleton.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace posegen::metrics {

inline constexpr double kDefaultPckThresholdMm = 150.0;

struct MetricsReport {
  double mpjpe = 0.0;     // mm
  double pa_mpjpe = 0.0;  // mm
  double pck = 0.0;       // percent
  long n_samples = 0;
  double threshold_mm = kDefaultPckThresholdMm;

  /// `key=value` lines in a fixed key order.
  std::string to_key_value() const;
  static MetricsReport from_key_value(const std::string& text);
  static std::string csv_header();
  std::string csv_row() const;
};

double mpjpe(const std::vector<JointSet>& x, const std::vector<JointSet>& x_hat);

struct Similarity {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  JointSet aligned;  // scale * rotation * x_hat + translation

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return scale * rotation * p + translation; }
};

/// Closed-form similarity transform mapping x_hat onto x in the least-squares
/// sense, with det(rotation) = +1. Throws on rank-deficient (collinear)
/// configurations.
Similarity procrustes_align(const JointSet& x, const JointSet& x_hat);

double pa_mpjpe(const std::vector<JointSet>& x, const std::vector<JointSet>& x_hat);
double pck(const std::vector<JointSet>& x, const std::vector<JointSet>& x_hat,
           double threshold_mm = kDefaultPckThresholdMm);

MetricsReport evaluate(const std::vector<JointSet>& x, const std::vector<JointSet>& x_hat,
                       double threshold_mm = kDefaultPckThresholdMm);

/// 100 * (baseline - improved) / baseline.
double relative_improvement(double baseline, double improved);

struct ViewpointHistogram {
  int bins = 0;
  std::vector<double> elevation;  // mass per bin over [-90, 90] degrees
  std::vector<double> azimuth;    // mass per bin over [-180, 180] degrees
  double window_mass = 0.0;       // fraction with elevation inside the window
  double window_lo_deg = 0.0;
  double window_hi_deg = 0.0;
};

ViewpointHistogram viewpoint_histogram(const std::vector<CameraView>& views, int bins,
                                       double window_lo_deg = 30.0, double window_hi_deg = 60.0);

}  // namespace posegen::metrics
