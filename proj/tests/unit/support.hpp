#pragma once

#include "posegen/random.hpp"
#include "posegen/skeleton.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

namespace posegen::test {

/// Fresh per-test scratch directory under the build tree.
inline std::filesystem::path scratch(const std::string& name) {
  const std::filesystem::path p = std::filesystem::path(POSEGEN_TEST_TMP) / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline PoseVector random_pose(Rng& rng, double scale = 0.6) {
  Eigen::VectorXd t(kPoseDim);
  for (int i = 0; i < kPoseDim; ++i) t(i) = uniform(rng, -scale, scale);
  return PoseVector(t);
}

/// Central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(const Eigen::MatrixXd&)>& f, Eigen::MatrixXd x,
                                 Eigen::Index r, Eigen::Index c, double h) {
  const double x0 = x(r, c);
  x(r, c) = x0 + h;
  const double up = f(x);
  x(r, c) = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

}  // namespace posegen::test
