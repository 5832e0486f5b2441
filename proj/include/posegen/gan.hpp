#pragma once

// Pose/view generator, part-wise discriminator, and the adversarial and
// estimator-feedback objectives.

#include "posegen/ad.hpp"
#include "posegen/estimator.hpp"
#include "posegen/nn.hpp"
#include "posegen/priors.hpp"
#include "posegen/renderer.hpp"
#include "posegen/skeleton.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

namespace posegen::gan {

// ---------------------------------------------------------------------------
// Real pose distribution

/// Per-component axis-angle bounds for every pose entry.
struct JointLimits {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;

  /// Parses `joint x_lo x_hi y_lo y_hi z_lo z_hi` lines.
  static JointLimits parse(const std::string& text);
  static JointLimits load(const std::filesystem::path& path);
  /// data/joint_limits.txt
  static const JointLimits& standard();

  /// Box shrunk around its center to `fraction` of the full width.
  JointLimits restricted(double fraction) const;
  bool contains(const PoseVector& theta, double tol = 1e-12) const;
  PoseVector sample(Rng& rng) const;
};

struct RealPoseCorpus {
  std::vector<PoseVector> poses;

  static RealPoseCorpus build(const JointLimits& limits, int count, std::uint64_t seed);
  Eigen::MatrixXd matrix() const;
};

/// Camera on the orbit with elevation uniform in [lo, hi] degrees and
/// azimuth uniform over the full circle.
CameraView sample_view(Rng& rng, double elevation_lo_deg, double elevation_hi_deg);

// ---------------------------------------------------------------------------
// Networks

struct GeneratorSpec {
  int latent_dim = kDefaultLatentDim;
  std::vector<int> hidden = {256, 256, 256, 256};
  nn::Activation activation = nn::Activation::silu;
  double k_max = std::numbers::pi;
  /// Initial scale of the raw pose outputs; sets the spread of the first poses.
  double output_gain = 0.1;
  /// Same for the camera outputs.
  double camera_gain = 1.0;
};

struct GeneratorOutput {
  ad::Var theta;  // B x 69
  ad::Var k;      // B x 3
};

class Generator {
 public:
  Generator() = default;
  Generator(GeneratorSpec spec, std::uint64_t seed);

  const GeneratorSpec& spec() const { return spec_; }
  ad::ParamSet& params() { return mlp_.params; }
  const ad::ParamSet& params() const { return mlp_.params; }

  /// theta = pi * tanh(raw_theta), k = k_max * tanh(raw_k).
  GeneratorOutput forward(ad::Tape& tape, const std::vector<ad::Var>& bound, ad::Var z) const;
  /// Untracked forward pass: rows of z -> (theta rows, k rows).
  std::pair<Eigen::MatrixXd, Eigen::MatrixXd> sample(const Eigen::MatrixXd& z) const;

 private:
  GeneratorSpec spec_;
  nn::Mlp mlp_;
};

struct DiscriminatorSpec {
  std::vector<int> hidden = {128, 128};
  nn::Activation activation = nn::Activation::silu;
};

/// Six part networks over the part slices of theta plus one whole-body
/// network; the score is their mean.
class Discriminator {
 public:
  static constexpr int kNetworks = kPartCount + 1;

  Discriminator() = default;
  Discriminator(DiscriminatorSpec spec, std::uint64_t seed, const SkeletonDef& skel = SkeletonDef::standard());

  ad::ParamSet& params() { return params_; }
  const ad::ParamSet& params() const { return params_; }

  /// B x 1 scores.
  ad::Var score(ad::Tape& tape, const std::vector<ad::Var>& bound, ad::Var theta) const;
  Eigen::VectorXd evaluate(const Eigen::MatrixXd& theta) const;

 private:
  DiscriminatorSpec spec_;
  std::array<nn::Mlp, kNetworks> nets_;
  std::array<std::vector<int>, kNetworks> slices_;
  ad::ParamSet params_;  // concatenation of nets_ parameters
};

/// Share of real scores above 0.5 and fake scores below 0.5.
double discriminator_accuracy(const Discriminator& d, const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake);

// ---------------------------------------------------------------------------
// Losses

enum class FeedbackMode { ind, ood };
FeedbackMode parse_feedback_mode(const std::string& name);
std::string to_string(FeedbackMode m);

struct FeedbackConfig {
  FeedbackMode mode = FeedbackMode::ood;
  double cap = 0.5;  // meters
  void validate() const;
};

/// mean (s - 1)^2
double adv_loss_g(const Eigen::VectorXd& fake);
ad::Var adv_loss_g(ad::Var fake);
/// mean (s_real - 1)^2 + mean s_fake^2
double disc_loss(const Eigen::VectorXd& real, const Eigen::VectorXd& fake);
ad::Var disc_loss(ad::Var real, ad::Var fake);

/// Mean per-joint Euclidean error E (meters); ind returns E, ood returns c - E.
double feedback_loss(const std::vector<JointSet>& x, const std::vector<JointSet>& x_hat, const FeedbackConfig& cfg);
/// Same on joint-position rows (B x 3J).
ad::Var feedback_loss(ad::Var x, ad::Var x_hat, const FeedbackConfig& cfg);
/// Mean per-joint Euclidean error on joint-position rows.
ad::Var mean_joint_error(ad::Var x, ad::Var x_hat);

struct GanConfig {
  double w1 = 1.0;
  double w2 = 0.1;
  double lr_g = 1e-4;
  double lr_d = 1e-4;
  /// Adam first-moment decay shared by both networks.
  double beta1 = 0.5;
  int batch_size = 16;
  int steps = 500;
  /// Adversarial-only steps run before `steps`; not recorded in the history.
  int warmup_steps = 1000;
  int disc_steps = 1;
  FeedbackConfig feedback;
  PriorKind prior = PriorKind::normal;
  /// false: cameras come from the IND window instead of the generator.
  bool learn_camera = true;
  double fixed_elevation_lo = -15.0;
  double fixed_elevation_hi = 15.0;
  /// Also descend the estimator's clipped loss on each generated batch.
  bool interleaved = false;
  double estimator_lr = 1e-4;
  estimator::EstimatorLossConfig estimator_loss;

  void validate() const;
};

double generator_loss(double adv, double fb, const GanConfig& cfg);
ad::Var generator_loss(ad::Var adv, ad::Var fb, const GanConfig& cfg);

// ---------------------------------------------------------------------------
// Training

struct GanStep {
  int step = 0;
  double l_g = 0.0;
  double l_d = 0.0;
  double mean_err = 0.0;  // meters; NaN when the feedback branch is not evaluated
};

std::string history_csv(const std::vector<GanStep>& history);

/// Frozen collaborators of generator training. The renderer and estimator are
/// needed only when the feedback branch is active (w2 > 0) or interleaved.
struct GanContext {
  const render::RadianceField* field = nullptr;
  render::RenderConfig render;
  estimator::Estimator* estimator = nullptr;
  const RealPoseCorpus* corpus = nullptr;
};

struct GanResult {
  Generator generator;
  Discriminator discriminator;
  std::vector<GanStep> history;
};

/// Alternates discriminator and generator updates. Throws on a non-finite
/// loss with the offending step and the loss components in the message.
GanResult train_gan(Generator gen, Discriminator disc, const GanContext& ctx, const GanConfig& cfg,
                    std::uint64_t seed);

/// Mean per-joint error of the estimator on rendered generator samples.
double estimator_error_on(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& k, const GanContext& ctx);

}  // namespace posegen::gan
