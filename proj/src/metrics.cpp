#include "posegen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace posegen::metrics {

namespace {

void check_batches(const std::vector<JointSet>& x, const std::vector<JointSet>& x_hat) {
  if (x.size() != x_hat.size()) throw std::invalid_argument("metrics: batch size mismatch");
  if (x.empty()) throw std::invalid_argument("metrics: empty batch");
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i].rows() != x_hat[i].rows()) throw std::invalid_argument("metrics: joint count mismatch");
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::string MetricsReport::to_key_value() const {
  std::ostringstream os;
  os << "mpjpe=" << fmt(mpjpe) << "\n"
     << "pa_mpjpe=" << fmt(pa_mpjpe) << "\n"
     << "pck=" << fmt(pck) << "\n"
     << "n_samples=" << n_samples << "\n"
     << "threshold_mm=" << fmt(threshold_mm) << "\n";
  return os.str();
}

MetricsReport MetricsReport::from_key_value(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw std::runtime_error("metrics record missing key " + k);
    return it->second;
  };
  MetricsReport r;
  r.mpjpe = std::stod(get("mpjpe"));
  r.pa_mpjpe = std::stod(get("pa_mpjpe"));
  r.pck = std::stod(get("pck"));
  r.n_samples = std::stol(get("n_samples"));
  r.threshold_mm = std::stod(get("threshold_mm"));
  return r;
}

std::string MetricsReport::csv_header() { return "mpjpe_mm,pa_mpjpe_mm,pck,n_samples,threshold_mm"; }

std::string MetricsReport::csv_row() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << mpjpe << "," << pa_mpjpe << "," << pck << "," << n_samples << ","
     << threshold_mm;
  return os.str();
}

double mpjpe(const std::vector<JointSet>& x, const std::vector<JointSet>& x_hat) {
  check_batches(x, x_hat);
  double total = 0.0;
  long count = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    total += (x[i] - x_hat[i]).rowwise().norm().sum();
    count += x[i].rows();
  }
  return 1000.0 * total / static_cast<double>(count);
}

Similarity procrustes_align(const JointSet& x, const JointSet& x_hat) {
  if (x.rows() != x_hat.rows()) throw std::invalid_argument("procrustes_align: joint count mismatch");
  if (x.rows() < 3) throw std::invalid_argument("procrustes_align: need at least 3 points");
  const Eigen::RowVector3d mu_x = x.colwise().mean();
  const Eigen::RowVector3d mu_y = x_hat.colwise().mean();
  const Eigen::MatrixXd xc = x.rowwise() - mu_x;
  const Eigen::MatrixXd yc = x_hat.rowwise() - mu_y;
  const double var_y = yc.squaredNorm();
  // cross-covariance, maps the prediction frame onto the target frame
  const Eigen::Matrix3d cov = xc.transpose() * yc;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  const double tol = 1e-12 * std::max(1.0, sv(0));
  Eigen::JacobiSVD<Eigen::MatrixXd> rank_x(xc), rank_y(yc);
  auto rank = [](const Eigen::VectorXd& s) {
    const double t = 1e-9 * std::max(1.0, s(0));
    return static_cast<int>((s.array() > t).count());
  };
  if (rank(rank_x.singularValues()) < 2 || rank(rank_y.singularValues()) < 2 || sv(1) <= tol)
    throw std::invalid_argument("procrustes_align: degenerate (rank < 2) configuration");
  Eigen::Vector3d d = Eigen::Vector3d::Ones();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2) = -1.0;
  Similarity s;
  s.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  s.scale = sv.dot(d) / var_y;
  s.translation = mu_x.transpose() - s.scale * s.rotation * mu_y.transpose();
  s.aligned.resize(x_hat.rows(), 3);
  for (Eigen::Index i = 0; i < x_hat.rows(); ++i) s.aligned.row(i) = s.apply(x_hat.row(i).transpose()).transpose();
  return s;
}

double pa_mpjpe(const std::vector<JointSet>& x, const std::vector<JointSet>& x_hat) {
  check_batches(x, x_hat);
  std::vector<JointSet> aligned;
  aligned.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) aligned.push_back(procrustes_align(x[i], x_hat[i]).aligned);
  return mpjpe(x, aligned);
}

double pck(const std::vector<JointSet>& x, const std::vector<JointSet>& x_hat, double threshold_mm) {
  if (!(threshold_mm > 0.0)) throw std::invalid_argument("pck: threshold must be positive");
  check_batches(x, x_hat);
  long hit = 0, count = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Eigen::VectorXd err = 1000.0 * (x[i] - x_hat[i]).rowwise().norm();
    hit += (err.array() < threshold_mm).count();
    count += err.size();
  }
  return 100.0 * static_cast<double>(hit) / static_cast<double>(count);
}

MetricsReport evaluate(const std::vector<JointSet>& x, const std::vector<JointSet>& x_hat, double threshold_mm) {
  MetricsReport r;
  r.mpjpe = mpjpe(x, x_hat);
  r.pa_mpjpe = pa_mpjpe(x, x_hat);
  r.pck = pck(x, x_hat, threshold_mm);
  r.n_samples = static_cast<long>(x.size());
  r.threshold_mm = threshold_mm;
  return r;
}

double relative_improvement(double baseline, double improved) {
  if (!(baseline > 0.0)) throw std::invalid_argument("relative_improvement: baseline must be positive");
  return 100.0 * (baseline - improved) / baseline;
}

ViewpointHistogram viewpoint_histogram(const std::vector<CameraView>& views, int bins, double window_lo_deg,
                                       double window_hi_deg) {
  if (bins < 2) throw std::invalid_argument("viewpoint_histogram: need at least 2 bins");
  if (views.empty()) throw std::invalid_argument("viewpoint_histogram: empty batch");
  constexpr double kDeg = 180.0 / std::numbers::pi;
  ViewpointHistogram h;
  h.bins = bins;
  h.elevation.assign(bins, 0.0);
  h.azimuth.assign(bins, 0.0);
  h.window_lo_deg = window_lo_deg;
  h.window_hi_deg = window_hi_deg;
  auto bin_of = [bins](double v, double lo, double hi) {
    const int b = static_cast<int>(std::floor((v - lo) / (hi - lo) * bins));
    return std::clamp(b, 0, bins - 1);
  };
  const double w = 1.0 / static_cast<double>(views.size());
  long inside = 0;
  for (const auto& k : views) {
    const ViewAngles a = view_angles(k);
    const double el = a.elevation * kDeg, az = a.azimuth * kDeg;
    h.elevation[bin_of(el, -90.0, 90.0)] += w;
    h.azimuth[bin_of(az, -180.0, 180.0)] += w;
    if (el >= window_lo_deg && el <= window_hi_deg) ++inside;
  }
  h.window_mass = static_cast<double>(inside) / static_cast<double>(views.size());
  return h;
}

}  // namespace posegen::metrics
