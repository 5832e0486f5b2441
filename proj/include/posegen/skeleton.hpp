#pragma once

// Articulated body model: axis-angle pose vectors, rotations, forward
// kinematics, orbit cameras and the six-part body decomposition.

#include "posegen/ad.hpp"

#include <Eigen/Dense>

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace posegen {

inline constexpr int kJointCount = 24;
inline constexpr int kPoseDim = 3 * (kJointCount - 1);  // 69
inline constexpr double kDefaultOrbitRadius = 2.5;

enum class BodyPart { torso = 0, head, left_arm, right_arm, left_leg, right_leg };
inline constexpr int kPartCount = 6;
inline constexpr std::array<BodyPart, kPartCount> kAllParts = {
    BodyPart::torso, BodyPart::head, BodyPart::left_arm,
    BodyPart::right_arm, BodyPart::left_leg, BodyPart::right_leg};

std::string to_string(BodyPart p);
BodyPart parse_body_part(const std::string& name);

/// Joint positions, one row per joint, meters, root at the origin.
using JointSet = Eigen::Matrix<double, Eigen::Dynamic, 3>;

/// Immutable kinematic tree. Joints are stored in topological order
/// (parent index < child index), root at 0.
class SkeletonDef {
 public:
  /// Parses `index parent dx dy dz part` lines; '#' starts a comment.
  static SkeletonDef parse(const std::string& text);
  static SkeletonDef load(const std::filesystem::path& path);
  /// The shipped 24-joint skeleton (data/skeleton.txt).
  static const SkeletonDef& standard();

  int joint_count() const { return static_cast<int>(parent_.size()); }
  int pose_dim() const { return 3 * (joint_count() - 1); }
  int parent(int j) const { return parent_[j]; }
  const Eigen::Vector3d& rest_offset(int j) const { return offsets_[j]; }
  /// Part of a non-root joint.
  BodyPart part_of(int j) const;
  /// Joints of a part, ascending.
  const std::vector<int>& part_joints(BodyPart p) const { return part_joints_[static_cast<int>(p)]; }
  double bone_length(int j) const { return offsets_[j].norm(); }
  /// Joint positions of the zero pose.
  JointSet rest_pose() const;

 private:
  std::vector<int> parent_;
  std::vector<Eigen::Vector3d> offsets_;
  std::vector<int> part_;  // -1 for the root
  std::array<std::vector<int>, kPartCount> part_joints_;
};

/// Canonicalizes an axis-angle vector to norm <= pi.
Eigen::Vector3d canonical_axis_angle(const Eigen::Vector3d& v);

/// Body pose: one axis-angle triple per non-root joint, radians. Triples with
/// norm above pi are wrapped to the equivalent rotation on construction.
class PoseVector {
 public:
  PoseVector() : theta_(Eigen::VectorXd::Zero(kPoseDim)) {}
  explicit PoseVector(const Eigen::VectorXd& theta);
  static PoseVector zero(int dim = kPoseDim) { return PoseVector(Eigen::VectorXd::Zero(dim)); }

  const Eigen::VectorXd& values() const { return theta_; }
  int size() const { return static_cast<int>(theta_.size()); }
  /// Axis-angle of joint j (1-based joint index, the root has none).
  Eigen::Vector3d joint(int j) const { return theta_.segment<3>(3 * (j - 1)); }

 private:
  Eigen::VectorXd theta_;
};

/// Camera orientation on the orbit sphere, axis-angle, radians, norm <= pi.
class CameraView {
 public:
  CameraView() : k_(Eigen::Vector3d::Zero()) {}
  explicit CameraView(const Eigen::Vector3d& k);
  const Eigen::Vector3d& values() const { return k_; }

 private:
  Eigen::Vector3d k_;
};

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle);
/// d R / d v_a for a = 0..2.
std::array<Eigen::Matrix3d, 3> rodrigues_jacobian(const Eigen::Vector3d& axis_angle);

/// Global joint rotations and positions.
struct Kinematics {
  std::vector<Eigen::Matrix3d> rotations;
  JointSet positions;
};

Kinematics pose_kinematics(const SkeletonDef& skel, const Eigen::VectorXd& theta,
                           const Eigen::Matrix3d& root_rotation = Eigen::Matrix3d::Identity());
JointSet forward_kinematics(const SkeletonDef& skel, const PoseVector& theta);

/// x_cam = rotation * x_world + translation. Camera axes: x right, y down,
/// z forward.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return rotation * x + translation; }
  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
};

/// Places the camera at rodrigues(k) * (0, 0, radius) looking at the root with
/// world +y as the up reference. When the view axis is parallel to +y the
/// reference falls back to -z.
RigidTransform camera_extrinsics(const CameraView& k, double radius = kDefaultOrbitRadius);

/// Elevation (asin of the up component) and azimuth (atan2(x, z)) of the
/// camera center direction, radians.
struct ViewAngles {
  double elevation = 0.0;
  double azimuth = 0.0;
};
ViewAngles view_angles(const CameraView& k);
/// Inverse of view_angles for the zero-roll camera on the orbit.
CameraView view_from_angles(double elevation, double azimuth);

/// Six sub-vectors in kAllParts order, each the concatenated triples of the
/// part's joints in ascending joint order.
std::array<Eigen::VectorXd, kPartCount> split_parts(const PoseVector& theta, const SkeletonDef& skel);
PoseVector join_parts(const std::array<Eigen::VectorXd, kPartCount>& parts, const SkeletonDef& skel);
/// Indices into theta covered by a part, matching split_parts ordering.
std::vector<int> part_indices(BodyPart p, const SkeletonDef& skel);

namespace ops {

/// Forward kinematics on a batch of poses (B x pose_dim). Output row layout
/// per joint: 9 rotation entries (row-major) followed by 3 position entries.
ad::Var forward_kinematics(ad::Var theta, const SkeletonDef& skel);
/// Joint positions (B x 3J, joint-major xyz) from a forward_kinematics output.
ad::Var joint_positions(ad::Var fk, const SkeletonDef& skel);
/// Camera from a batch of views (B x 3). Output row: world-to-camera rotation
/// (9, row-major) followed by the camera center (3).
ad::Var camera(ad::Var k, double radius);

inline constexpr int kFkStride = 12;
inline constexpr int kCameraWidth = 12;

}  // namespace ops

}  // namespace posegen
