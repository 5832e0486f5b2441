#include "posegen/skeleton.hpp"

#include <unsupported/Eigen/AutoDiff>

#include <algorithm>
#include <cmath>
#include <memory>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#ifndef POSEGEN_DATA_DIR
#define POSEGEN_DATA_DIR "data"
#endif

namespace posegen {

namespace {

constexpr double kPi = std::numbers::pi;

const std::map<std::string, BodyPart>& part_names() {
  static const std::map<std::string, BodyPart> names = {
      {"torso", BodyPart::torso},         {"head", BodyPart::head},
      {"left_arm", BodyPart::left_arm},   {"right_arm", BodyPart::right_arm},
      {"left_leg", BodyPart::left_leg},   {"right_leg", BodyPart::right_leg}};
  return names;
}

template <typename T>
T value_of(const T& x) {
  return x;
}
template <typename D>
double value_of(const Eigen::AutoDiffScalar<D>& x) {
  return x.value();
}

template <typename T>
Eigen::Matrix<T, 3, 3> rodrigues_t(const Eigen::Matrix<T, 3, 1>& v) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  const T th2 = v.squaredNorm();
  Eigen::Matrix<T, 3, 3> k;
  k << T(0), -v(2), v(1), v(2), T(0), -v(0), -v(1), v(0), T(0);
  T a, b;
  if (value_of(th2) < 1e-12) {
    a = T(1) - th2 / T(6);
    b = T(0.5) - th2 / T(24);
  } else {
    const T th = sqrt(th2);
    a = sin(th) / th;
    b = (T(1) - cos(th)) / th2;
  }
  return Eigen::Matrix<T, 3, 3>::Identity() + a * k + b * (k * k);
}

template <typename T>
void camera_t(const Eigen::Matrix<T, 3, 1>& kv, double radius, Eigen::Matrix<T, 3, 3>& r_wc,
              Eigen::Matrix<T, 3, 1>& center) {
  using std::sqrt;
  const Eigen::Matrix<T, 3, 3> rot = rodrigues_t<T>(kv);
  center = rot.col(2) * T(radius);
  const Eigen::Matrix<T, 3, 1> fwd = -rot.col(2);
  Eigen::Matrix<T, 3, 1> up(T(0), T(1), T(0));
  Eigen::Matrix<T, 3, 1> right = fwd.cross(up);
  if (value_of(right.squaredNorm()) < 1e-18) {
    up = Eigen::Matrix<T, 3, 1>(T(0), T(0), T(-1));
    right = fwd.cross(up);
  }
  right /= sqrt(right.squaredNorm());
  const Eigen::Matrix<T, 3, 1> down = fwd.cross(right);
  r_wc.row(0) = right.transpose();
  r_wc.row(1) = down.transpose();
  r_wc.row(2) = fwd.transpose();
}

}  // namespace

std::string to_string(BodyPart p) {
  for (const auto& [name, part] : part_names())
    if (part == p) return name;
  return "?";
}

BodyPart parse_body_part(const std::string& name) {
  auto it = part_names().find(name);
  if (it == part_names().end()) throw std::invalid_argument("unknown body part: " + name);
  return it->second;
}

SkeletonDef SkeletonDef::parse(const std::string& text) {
  SkeletonDef s;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    int index = 0, parent = 0;
    double dx = 0, dy = 0, dz = 0;
    std::string part;
    if (!(ls >> index)) continue;
    if (!(ls >> parent >> dx >> dy >> dz >> part))
      throw std::runtime_error("skeleton: malformed line " + std::to_string(line_no));
    if (index != s.joint_count())
      throw std::runtime_error("skeleton: joints must be listed in order (line " + std::to_string(line_no) + ")");
    if (index == 0 && parent != -1) throw std::runtime_error("skeleton: joint 0 must be the root");
    if (index > 0 && (parent < 0 || parent >= index))
      throw std::runtime_error("skeleton: parent of joint " + std::to_string(index) + " must precede it");
    s.parent_.push_back(parent);
    s.offsets_.emplace_back(dx, dy, dz);
    if (index == 0) {
      s.part_.push_back(-1);
    } else {
      const auto p = parse_body_part(part);
      s.part_.push_back(static_cast<int>(p));
      s.part_joints_[static_cast<int>(p)].push_back(index);
    }
  }
  if (s.joint_count() < 2) throw std::runtime_error("skeleton: need at least two joints");
  return s;
}

SkeletonDef SkeletonDef::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("skeleton: cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

const SkeletonDef& SkeletonDef::standard() {
  static const SkeletonDef skel = [] {
    const char* env = std::getenv("POSEGEN_DATA_DIR");
    const std::filesystem::path dir = env ? env : POSEGEN_DATA_DIR;
    auto s = load(dir / "skeleton.txt");
    if (s.joint_count() != kJointCount) throw std::runtime_error("standard skeleton must have 24 joints");
    return s;
  }();
  return skel;
}

BodyPart SkeletonDef::part_of(int j) const {
  if (j <= 0 || j >= joint_count()) throw std::out_of_range("part_of: not a non-root joint");
  return static_cast<BodyPart>(part_[j]);
}

JointSet SkeletonDef::rest_pose() const {
  JointSet x(joint_count(), 3);
  x.row(0).setZero();
  for (int j = 1; j < joint_count(); ++j) x.row(j) = x.row(parent_[j]) + offsets_[j].transpose();
  return x;
}

Eigen::Vector3d canonical_axis_angle(const Eigen::Vector3d& v) {
  const double n = v.norm();
  if (n <= kPi) return v;
  const double wrapped = n - 2.0 * kPi * std::round(n / (2.0 * kPi));
  return v / n * wrapped;
}

PoseVector::PoseVector(const Eigen::VectorXd& theta) : theta_(theta) {
  if (theta_.size() % 3 != 0) throw std::invalid_argument("PoseVector: size must be a multiple of 3");
  if (!theta_.allFinite()) throw std::invalid_argument("PoseVector: non-finite value");
  for (Eigen::Index i = 0; i < theta_.size(); i += 3)
    theta_.segment<3>(i) = canonical_axis_angle(theta_.segment<3>(i));
}

CameraView::CameraView(const Eigen::Vector3d& k) {
  if (!k.allFinite()) throw std::invalid_argument("CameraView: non-finite value");
  k_ = canonical_axis_angle(k);
}

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle) { return rodrigues_t<double>(axis_angle); }

std::array<Eigen::Matrix3d, 3> rodrigues_jacobian(const Eigen::Vector3d& v) {
  using AD = Eigen::AutoDiffScalar<Eigen::Vector3d>;
  Eigen::Matrix<AD, 3, 1> x;
  for (int i = 0; i < 3; ++i) x(i) = AD(v(i), 3, i);
  const Eigen::Matrix<AD, 3, 3> r = rodrigues_t<AD>(x);
  std::array<Eigen::Matrix3d, 3> out;
  for (int a = 0; a < 3; ++a)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) out[a](i, j) = r(i, j).derivatives()(a);
  return out;
}

Kinematics pose_kinematics(const SkeletonDef& skel, const Eigen::VectorXd& theta,
                           const Eigen::Matrix3d& root_rotation) {
  if (theta.size() != skel.pose_dim()) throw std::invalid_argument("forward_kinematics: pose size mismatch");
  const int n = skel.joint_count();
  Kinematics k;
  k.rotations.resize(n);
  k.positions.resize(n, 3);
  k.rotations[0] = root_rotation;
  k.positions.row(0).setZero();
  for (int j = 1; j < n; ++j) {
    const int p = skel.parent(j);
    k.positions.row(j) = k.positions.row(p) + (k.rotations[p] * skel.rest_offset(j)).transpose();
    k.rotations[j] = k.rotations[p] * rodrigues(theta.segment<3>(3 * (j - 1)));
  }
  return k;
}

JointSet forward_kinematics(const SkeletonDef& skel, const PoseVector& theta) {
  return pose_kinematics(skel, theta.values()).positions;
}

RigidTransform camera_extrinsics(const CameraView& k, double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("camera_extrinsics: radius must be positive");
  Eigen::Matrix3d r;
  Eigen::Vector3d c;
  camera_t<double>(k.values(), radius, r, c);
  RigidTransform t;
  t.rotation = r;
  t.translation = -r * c;
  return t;
}

ViewAngles view_angles(const CameraView& k) {
  const Eigen::Vector3d d = rodrigues(k.values()).col(2);
  ViewAngles a;
  a.elevation = std::asin(std::clamp(d.y(), -1.0, 1.0));
  a.azimuth = std::atan2(d.x(), d.z());
  return a;
}

CameraView view_from_angles(double elevation, double azimuth) {
  const Eigen::Vector3d d(std::cos(elevation) * std::sin(azimuth), std::sin(elevation),
                          std::cos(elevation) * std::cos(azimuth));
  const Eigen::Vector3d z = Eigen::Vector3d::UnitZ();
  const Eigen::Vector3d axis = z.cross(d);
  const double s = axis.norm();
  const double c = z.dot(d);
  if (s < 1e-12) return c > 0 ? CameraView() : CameraView(Eigen::Vector3d(0, kPi, 0));
  return CameraView(axis / s * std::atan2(s, c));
}

std::vector<int> part_indices(BodyPart p, const SkeletonDef& skel) {
  std::vector<int> idx;
  for (int j : skel.part_joints(p))
    for (int a = 0; a < 3; ++a) idx.push_back(3 * (j - 1) + a);
  return idx;
}

std::array<Eigen::VectorXd, kPartCount> split_parts(const PoseVector& theta, const SkeletonDef& skel) {
  if (theta.size() != skel.pose_dim()) throw std::invalid_argument("split_parts: pose size mismatch");
  std::array<Eigen::VectorXd, kPartCount> out;
  for (BodyPart p : kAllParts) {
    const auto idx = part_indices(p, skel);
    Eigen::VectorXd v(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) v(static_cast<Eigen::Index>(i)) = theta.values()(idx[i]);
    out[static_cast<int>(p)] = std::move(v);
  }
  return out;
}

PoseVector join_parts(const std::array<Eigen::VectorXd, kPartCount>& parts, const SkeletonDef& skel) {
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(skel.pose_dim());
  for (BodyPart p : kAllParts) {
    const auto idx = part_indices(p, skel);
    const auto& v = parts[static_cast<int>(p)];
    if (v.size() != static_cast<Eigen::Index>(idx.size())) throw std::invalid_argument("join_parts: part size mismatch");
    for (std::size_t i = 0; i < idx.size(); ++i) theta(idx[i]) = v(static_cast<Eigen::Index>(i));
  }
  return PoseVector(theta);
}

namespace ops {

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}

ad::Var forward_kinematics(ad::Var theta, const SkeletonDef& skel) {
  const int n = skel.joint_count();
  if (theta.cols() != skel.pose_dim()) throw std::invalid_argument("ops::forward_kinematics: pose size mismatch");
  const Eigen::Index batch = theta.rows();
  Eigen::MatrixXd out(batch, n * kFkStride);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const Kinematics k = pose_kinematics(skel, theta.value().row(b).transpose());
    for (int j = 0; j < n; ++j) {
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) out(b, j * kFkStride + 3 * r + c) = k.rotations[j](r, c);
      for (int a = 0; a < 3; ++a) out(b, j * kFkStride + 9 + a) = k.positions(j, a);
    }
  }
  const SkeletonDef* sk = &skel;
  return theta.tape->record(out, {theta}, [theta, sk, out](ad::Tape& t, const Eigen::MatrixXd& g) {
    const SkeletonDef& skel = *sk;
    const int n = skel.joint_count();
    const Eigen::Index batch = g.rows();
    const Eigen::MatrixXd& th = t.value(theta);
    Eigen::MatrixXd gtheta = Eigen::MatrixXd::Zero(batch, skel.pose_dim());
    std::vector<Eigen::Matrix3d> rot(n), grot(n);
    std::vector<Eigen::Vector3d> gpos(n);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (int j = 0; j < n; ++j) {
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) {
            rot[j](r, c) = out(b, j * kFkStride + 3 * r + c);
            grot[j](r, c) = g(b, j * kFkStride + 3 * r + c);
          }
        for (int a = 0; a < 3; ++a) gpos[j](a) = g(b, j * kFkStride + 9 + a);
      }
      for (int j = n - 1; j >= 1; --j) {
        const int p = skel.parent(j);
        const Eigen::Vector3d v = th.row(b).segment<3>(3 * (j - 1)).transpose();
        const Eigen::Matrix3d local = rodrigues(v);
        const Eigen::Matrix3d glocal = rot[p].transpose() * grot[j];
        grot[p] += grot[j] * local.transpose();
        grot[p] += gpos[j] * skel.rest_offset(j).transpose();
        gpos[p] += gpos[j];
        const auto dr = rodrigues_jacobian(v);
        for (int a = 0; a < 3; ++a) gtheta(b, 3 * (j - 1) + a) = glocal.cwiseProduct(dr[a]).sum();
      }
    }
    t.accumulate(theta, gtheta);
  });
}

ad::Var joint_positions(ad::Var fk, const SkeletonDef& skel) {
  std::vector<int> cols;
  for (int j = 0; j < skel.joint_count(); ++j)
    for (int a = 0; a < 3; ++a) cols.push_back(j * kFkStride + 9 + a);
  return ad::gather_cols(fk, cols);
}

ad::Var camera(ad::Var k, double radius) {
  if (k.cols() != 3) throw std::invalid_argument("ops::camera: expects B x 3 views");
  if (!(radius > 0.0)) throw std::invalid_argument("ops::camera: radius must be positive");
  using AD = Eigen::AutoDiffScalar<Eigen::Vector3d>;
  const Eigen::Index batch = k.rows();
  Eigen::MatrixXd out(batch, kCameraWidth);
  auto jac = std::make_shared<std::vector<Eigen::Matrix<double, kCameraWidth, 3>>>(batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    Eigen::Matrix<AD, 3, 1> x;
    for (int i = 0; i < 3; ++i) x(i) = AD(k.value()(b, i), 3, i);
    Eigen::Matrix<AD, 3, 3> r;
    Eigen::Matrix<AD, 3, 1> c;
    camera_t<AD>(x, radius, r, c);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        out(b, 3 * i + j) = r(i, j).value();
        (*jac)[b].row(3 * i + j) = r(i, j).derivatives().transpose();
      }
    for (int i = 0; i < 3; ++i) {
      out(b, 9 + i) = c(i).value();
      (*jac)[b].row(9 + i) = c(i).derivatives().transpose();
    }
  }
  return k.tape->record(std::move(out), {k}, [k, jac](ad::Tape& t, const Eigen::MatrixXd& g) {
    Eigen::MatrixXd gk(g.rows(), 3);
    for (Eigen::Index b = 0; b < g.rows(); ++b) gk.row(b) = g.row(b) * (*jac)[b];
    t.accumulate(k, gk);
  });
}

}  // namespace ops

}  // namespace posegen
