#pragma once

// Image synthesis from (pose, view): an analytic capsule rasterizer used as
// ground truth, and a differentiable skeleton-conditioned radiance field
// rendered by ray marching.

#include "posegen/ad.hpp"
#include "posegen/nn.hpp"
#include "posegen/skeleton.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace posegen::render {

struct RenderConfig {
  int height = 64;
  int width = 64;
  int samples_per_ray = 32;
  double near = 1.3;
  double far = 3.7;
  double background = 0.0;
  int channels = 1;
  double radius = kDefaultOrbitRadius;
  /// Focal length in units of the image width.
  double focal_scale = 1.0;

  void validate() const;
  double delta() const { return (far - near) / samples_per_ray; }
  double focal() const { return focal_scale * width; }
  int pixel_count() const { return height * width; }
};

/// height x width x channels, values in [0, 1], stored as (y * width + x) * channels + c.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  Eigen::VectorXd pixels;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0);
  double& at(int y, int x, int c = 0) { return pixels((y * width + x) * channels + c); }
  double at(int y, int x, int c = 0) const { return pixels((y * width + x) * channels + c); }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width && channels == o.channels; }
};

/// 10 log10(1 / MSE); identical images report 99 dB.
double psnr(const Image& a, const Image& b);
inline constexpr double kPsnrCap = 99.0;

/// Unit ray direction through the center of pixel (x, y), camera frame.
Eigen::Vector3d pixel_direction(const RenderConfig& cfg, double x, double y);

// ---------------------------------------------------------------------------
// Volume compositing

struct CompositeResult {
  Eigen::VectorXd color;          // per channel
  Eigen::VectorXd weights;        // w_i = T_i (1 - exp(-sigma_i delta_i))
  Eigen::VectorXd transmittance;  // T_i = exp(-sum_{j<i} sigma_j delta_j)
  double final_transmittance = 1.0;
};

/// Front-to-back alpha compositing of Q samples; colors is Q x channels.
CompositeResult composite(const Eigen::VectorXd& sigmas, const Eigen::VectorXd& deltas,
                          const Eigen::MatrixXd& colors);

// ---------------------------------------------------------------------------
// Skeleton-relative encoding

/// Per non-root joint j (bone from parent(j) to j): the point in the parent
/// joint's frame (3 values) followed by its distance to the bone segment.
Eigen::VectorXd bone_relative_encode(const Eigen::Vector3d& point, const PoseVector& theta,
                                     const SkeletonDef& skel = SkeletonDef::standard());
Eigen::VectorXd bone_relative_encode(const Eigen::Vector3d& point, const Kinematics& kin, const SkeletonDef& skel);

struct FieldSpec {
  std::vector<int> hidden = {128, 128, 128, 128};
  nn::Activation activation = nn::Activation::silu;
  /// Bone influence is 1 within cutoff_inner of a bone and 0 beyond cutoff_outer.
  double cutoff_inner = 0.10;
  double cutoff_outer = 0.20;
  int channels = 1;

  int input_dim(const SkeletonDef& skel) const { return 5 * (skel.joint_count() - 1) + 1; }
};

/// Field network over the cutoff-weighted bone encoding. Per bone b the input
/// carries m_b * q_b / s, m_b * d_b / s and m_b, where m_b is the smooth bone
/// influence and s = cutoff_outer; the last input is the union influence
/// 1 - prod_b (1 - m_b), which also gates density so the field is exactly
/// empty away from the skeleton.
class RadianceField {
 public:
  RadianceField() = default;
  RadianceField(FieldSpec spec, const SkeletonDef& skel, std::uint64_t seed);

  const FieldSpec& spec() const { return spec_; }
  const nn::Mlp& mlp() const { return mlp_; }
  nn::Mlp& mlp() { return mlp_; }
  ad::ParamSet& params() { return mlp_.params; }
  const ad::ParamSet& params() const { return mlp_.params; }
  /// Zeroes the density so every render returns the background.
  void make_empty();
  bool is_empty() const { return empty_; }
  void set_empty(bool e) { empty_ = e; }

 private:
  FieldSpec spec_;
  nn::Mlp mlp_;
  bool empty_ = false;
};

/// A set of camera-frame rays, each tied to one pose/camera row.
struct RaySet {
  std::vector<int> pose_index;
  std::vector<Eigen::Vector3d> directions;  // unit, camera frame
  std::vector<double> jitter;               // optional per-ray offset in [0, 1) bins; empty = midpoints

  std::size_t size() const { return pose_index.size(); }
};

/// All pixel rays of `images` images, image-major.
RaySet image_rays(const RenderConfig& cfg, int images);

struct FieldBinding {
  const RadianceField* field = nullptr;
  std::vector<ad::Var> params;
};

FieldBinding bind_field(ad::Tape& tape, const RadianceField& field, bool requires_grad);

/// Differentiable ray colors (rays x channels) given forward-kinematics rows
/// (P x 12J) and camera rows (P x 12) from posegen::ops.
ad::Var render_rays(const FieldBinding& field, ad::Var fk, ad::Var cam, const RaySet& rays,
                    const RenderConfig& cfg, const SkeletonDef& skel = SkeletonDef::standard());

/// Differentiable images, B x (H*W*C), from poses (B x 69) and views (B x 3).
ad::Var render_images(const FieldBinding& field, ad::Var theta, ad::Var views, const RenderConfig& cfg,
                      const SkeletonDef& skel = SkeletonDef::standard());

Image render(const PoseVector& theta, const CameraView& k, const RadianceField& field, const RenderConfig& cfg);

/// Converts a row of render_images output into an Image.
Image image_from_row(const Eigen::RowVectorXd& row, const RenderConfig& cfg);

// ---------------------------------------------------------------------------
// Analytic capsule rasterizer

struct OracleStyle {
  /// Brightness gain for surfaces facing the body's forward axis.
  double front_shading = 0.4;
};

/// Capsule radius and base intensity of the bone ending at joint j.
struct Capsule {
  double radius = 0.05;
  double gray = 0.7;
};
Capsule capsule_for_joint(int j);

Image oracle_render(const PoseVector& theta, const CameraView& k, const RenderConfig& cfg,
                    const OracleStyle& style = {}, const Eigen::Matrix3d& root_rotation = Eigen::Matrix3d::Identity());

// ---------------------------------------------------------------------------
// Field training

struct NerfTrainConfig {
  double lambda_theta = 0.0;
  double lambda_t = 0.0;
  bool pose_refinement = false;
  int epochs = 40;
  int steps_per_epoch = 50;
  int rays_per_batch = 512;
  double learning_rate = 2e-3;
  double final_learning_rate = 2e-4;
  double pose_learning_rate = 1e-3;
  /// Share of each ray batch drawn from non-background pixels.
  double foreground_fraction = 0.5;
  bool jitter = false;
  int patience = 10;
  double psnr_floor = 20.0;
  int holdout_images = 20;

  void validate() const;
};

/// Training images with their pose/view labels; `frame` orders poses in time
/// for the smoothness prior (images sharing a frame share a pose).
struct NerfDataset {
  std::vector<Image> images;
  std::vector<int> frame;
  std::vector<PoseVector> poses;  // indexed by frame
  std::vector<CameraView> views;  // indexed by image
};

struct NerfLossTerms {
  double reconstruction = 0.0;
  double pose_deviation = 0.0;
  double smoothness = 0.0;
  double total = 0.0;
};

struct NerfTrainResult {
  RadianceField field;
  std::vector<PoseVector> refined_poses;
  std::vector<NerfLossTerms> history;  // per epoch means
  double holdout_psnr = 0.0;
  bool success = false;
  std::string diagnostic;
};

/// Second finite difference smoothness: sum over interior frames of
/// || theta[t+1] - 2 theta[t] + theta[t-1] ||.
ad::Var smoothness_term(ad::Var poses);
/// Squared L2 deviation of refined poses from their labels, summed over frames.
ad::Var pose_deviation_term(ad::Var poses, ad::Var labels);

NerfLossTerms nerf_loss(const FieldBinding& field, ad::Var poses, ad::Var labels, const NerfDataset& data,
                        const std::vector<int>& image_ids, const RaySet& rays,
                        const std::vector<double>& targets, const NerfTrainConfig& cfg,
                        const RenderConfig& rcfg, ad::Var* total_out);

NerfTrainResult train_nerf(const NerfDataset& data, const FieldSpec& spec, const NerfTrainConfig& cfg,
                           const RenderConfig& rcfg, std::uint64_t seed);

/// Mean PSNR of field renders against reference images.
double mean_psnr(const RadianceField& field, const std::vector<Image>& images, const std::vector<PoseVector>& poses,
                 const std::vector<CameraView>& views, const RenderConfig& cfg);

}  // namespace posegen::render
