#pragma once

// Experiment configuration: nested YAML sections, unknown keys rejected.

#include "posegen/estimator.hpp"
#include "posegen/gan.hpp"
#include "posegen/renderer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace posegen::pipeline {

struct DataConfig {
  /// Share of each joint-limit interval (around its center) that defines the
  /// real pose distribution used by every split and the GAN corpus.
  double pose_fraction = 0.5;
  int corpus_size = 5000;
  double ind_elevation_lo = -15.0;
  double ind_elevation_hi = 15.0;
  double ood_elevation_lo = 30.0;
  double ood_elevation_hi = 60.0;
  int pretrain_samples = 2000;
  int test_samples = 500;
  int generate_samples = 2000;
  /// Estimator/generation image side length.
  int image_size = 32;
};

struct RendererSection {
  render::RenderConfig render;
  render::FieldSpec field = [] {
    render::FieldSpec f;
    f.hidden.assign(6, 128);
    return f;
  }();
  render::NerfTrainConfig train = [] {
    render::NerfTrainConfig t;
    t.epochs = 30;
    return t;
  }();
  int poses = 300;
  int views = 5;
};

struct EstimatorSection {
  estimator::EstimatorSpec spec;
  estimator::EstimatorTrainConfig pretrain;
  estimator::EstimatorTrainConfig finetune = [] {
    estimator::EstimatorTrainConfig t;
    t.epochs = 10;
    t.learning_rate = 5e-4;
    return t;
  }();
  bool replay = true;
  /// IND replay samples per generated sample.
  double replay_ratio = 1.0;
  /// Pretraining fails unless the last epoch's mean pose error is below this.
  double train_error_floor = 1.15;
};

struct GanSection {
  gan::GanConfig train;
  gan::GeneratorSpec generator;
  gan::DiscriminatorSpec discriminator;
};

struct AblationCell {
  std::string name;
  std::string variant = "A3";  // A1: theta only, A2: theta + K, A3: theta + K + feedback
  gan::FeedbackMode mode = gan::FeedbackMode::ood;
  PriorKind prior = PriorKind::normal;
  int samples = 2000;
};

struct AblationSection {
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<AblationCell> cells;  // empty: default_cells()
  /// Run the full variant x mode x prior x size product instead of `cells`.
  bool full_grid = false;
  std::vector<int> sizes = {500, 2000};

  std::vector<AblationCell> resolved() const;
  static std::vector<AblationCell> default_cells();
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  DataConfig data;
  RendererSection renderer;
  EstimatorSection estimator;
  GanSection gan;
  AblationSection ablation;

  void validate() const;
  std::string to_yaml() const;
  static ExperimentConfig from_yaml(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  /// FNV-1a of the canonical YAML with output_dir and gan mode blanked, so
  /// per-invocation choices do not invalidate checkpoints.
  std::uint64_t hash() const;

  /// Render settings for estimator-resolution images.
  render::RenderConfig image_render() const;
  gan::JointLimits pose_limits() const;
};

std::string hash_hex(std::uint64_t h);

}  // namespace posegen::pipeline
