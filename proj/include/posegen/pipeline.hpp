#pragma once

// Experiment phases over a run directory: pretraining, renderer training,
// generation, fine-tuning, evaluation, ablation and reporting.

#include "posegen/config.hpp"
#include "posegen/estimator.hpp"
#include "posegen/gan.hpp"
#include "posegen/io.hpp"
#include "posegen/metrics.hpp"
#include "posegen/renderer.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace posegen::pipeline {

namespace fs = std::filesystem;
using estimator::RenderedSample;

/// Pose/view labels in the order oracle_samples draws them.
std::vector<std::pair<PoseVector, CameraView>> draw_labels(const gan::JointLimits& limits, double elevation_lo,
                                                           double elevation_hi, int count, std::uint64_t seed);

/// Oracle-rendered samples with poses from `limits` and views from an
/// elevation window, quantized to the 16-bit image grid.
std::vector<RenderedSample> oracle_samples(const gan::JointLimits& limits, double elevation_lo, double elevation_hi,
                                           int count, std::uint64_t seed, const render::RenderConfig& rc,
                                           const std::string& split);

struct Splits {
  std::vector<RenderedSample> pretrain;
  std::vector<RenderedSample> ind_test;
  std::vector<RenderedSample> ood_test;
};
Splits make_splits(const ExperimentConfig& cfg);

metrics::MetricsReport evaluate_estimator(const estimator::Estimator& est, const std::vector<RenderedSample>& data);

struct PretrainOutcome {
  estimator::Estimator estimator;
  std::vector<estimator::EpochStats> history;
  metrics::MetricsReport ind;
  metrics::MetricsReport ood;
};

struct RendererOutcome {
  render::RadianceField field;
  double holdout_psnr = 0.0;
  std::vector<render::NerfLossTerms> history;
};

struct GenerateSpec {
  gan::GanConfig gan;
  int samples = 0;
};

/// GAN settings of an ablation cell: A1 draws cameras from the IND window and
/// drops feedback, A2 lets the generator choose cameras without feedback, A3
/// is the full objective.
gan::GanConfig variant_config(const gan::GanConfig& base, const AblationCell& cell);

struct GenerateOutcome {
  gan::Generator generator;
  std::vector<gan::GanStep> history;
  io::DatasetManifest manifest;
  metrics::ViewpointHistogram views;
  double generated_error_mm = 0.0;  // estimator MPJPE on the generated samples
};

struct FinetuneOutcome {
  estimator::Estimator estimator;
  std::vector<estimator::EpochStats> history;
  metrics::MetricsReport ind;
  metrics::MetricsReport ood;
};

struct AblationRow {
  std::string cell;
  std::string variant;
  std::string mode;
  std::string prior;
  int samples = 0;
  std::uint64_t seed = 0;
  metrics::MetricsReport ind;
  metrics::MetricsReport ood;
  double ood_window_mass = 0.0;
  std::string status = "ok";
};

struct AblationOutcome {
  std::vector<AblationRow> rows;   // per seed, baseline rows included (cell "baseline")
  std::vector<AblationRow> means;  // per cell, seed = 0
};

using NamedMetrics = std::vector<std::pair<std::string, metrics::MetricsReport>>;

struct ReportOutcome {
  std::vector<fs::path> artifacts;
  std::vector<std::string> gaps;
};

/// A run directory bound to one configuration. The configuration is written
/// on construction; an existing directory must hold an equal-hash config.
class Run {
 public:
  explicit Run(ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& dir() const { return dir_; }
  std::uint64_t hash() const { return hash_; }

  PretrainOutcome pretrain_estimator();
  RendererOutcome train_renderer();
  GenerateOutcome generate(gan::FeedbackMode mode);
  FinetuneOutcome finetune(gan::FeedbackMode mode);
  /// Baseline and (when present) fine-tuned metrics on both test splits.
  NamedMetrics evaluate(gan::FeedbackMode mode);
  /// Runs every cell for every ablation seed in ablate/seed_<s>/, reusing
  /// this run's renderer. Finished cells are picked up from disk.
  AblationOutcome ablate();
  /// split: generated | pretrain | ind_test | ood_test
  fs::path export_dataset(const std::string& split, gan::FeedbackMode mode, const fs::path& dest);
  ReportOutcome report();

  estimator::Estimator load_baseline() const;
  render::RadianceField load_renderer() const;

  /// Generation core shared by `generate` and `ablate`.
  GenerateOutcome generate_into(const fs::path& out, const GenerateSpec& spec, const estimator::Estimator& est,
                                const render::RadianceField& field, std::uint64_t seed);
  FinetuneOutcome finetune_from(const fs::path& out, const estimator::Estimator& baseline,
                                const io::DatasetManifest& generated, std::size_t count, const Splits& splits,
                                const metrics::MetricsReport& baseline_ood, std::uint64_t seed);

 private:
  void record(const std::string& phase, const std::vector<std::string>& artifacts,
              const std::map<std::string, double>& metrics, double seconds) const;

  ExperimentConfig cfg_;
  fs::path dir_;
  std::uint64_t hash_ = 0;
};

std::string metrics_csv(const NamedMetrics& rows);
NamedMetrics read_metrics_csv(const std::string& text);
std::string ablation_csv(const std::vector<AblationRow>& rows);
std::vector<AblationRow> read_ablation_csv(const std::string& text);

/// Writes report/ under `run_dir` from the files the phases left behind.
ReportOutcome write_report(const fs::path& run_dir);

/// Relative change formatted with one decimal and a percent sign.
std::string percent(double value);

}  // namespace posegen::pipeline
