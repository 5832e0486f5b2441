// Command-line driver for the experiment phases.

#include "posegen/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

using namespace posegen;
using namespace posegen::pipeline;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode = "ood";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "YAML configuration (defaults when omitted)");
  cmd->add_option("--seed", c.seed, "Root seed, overrides the config");
  cmd->add_option("--out", c.out, "Run directory, overrides the config");
  cmd->add_option("--mode", c.mode, "Feedback mode")->check(CLI::IsMember({"ind", "ood"}));
}

Run open_run(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.output_dir = c.out;
  return Run(cfg);
}

void print(const std::string& name, const metrics::MetricsReport& r) {
  std::cout << name << ": MPJPE " << r.mpjpe << " mm, PA-MPJPE " << r.pa_mpjpe << " mm, PCK " << r.pck << "%\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pose and viewpoint generation for estimator fine-tuning"};
  app.require_subcommand(1);
  Common c;
  std::string split = "generated", dest;

  auto* pretrain = app.add_subcommand("pretrain-estimator", "Train the baseline estimator on IND oracle renders");
  auto* renderer = app.add_subcommand("train-renderer", "Fit the radiance field to oracle renders");
  auto* generate = app.add_subcommand("generate", "Train the generator and render a labeled dataset");
  auto* finetune = app.add_subcommand("finetune", "Fine-tune the baseline on generated data plus replay");
  auto* evaluate = app.add_subcommand("evaluate", "Score baseline and fine-tuned estimators on both test splits");
  auto* ablate = app.add_subcommand("ablate", "Run the ablation grid over seeds");
  auto* exporter = app.add_subcommand("export-dataset", "Write a split as a checksummed dataset directory");
  auto* report = app.add_subcommand("report", "Write figures and summary tables for the run");
  for (auto* cmd : {pretrain, renderer, generate, finetune, evaluate, ablate, exporter, report}) add_common(cmd, c);
  exporter->add_option("--split", split, "Split to export")
      ->check(CLI::IsMember({"generated", "pretrain", "ind_test", "ood_test"}));
  exporter->add_option("--dest", dest, "Destination directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    Run run = open_run(c);
    const auto mode = gan::parse_feedback_mode(c.mode);
    std::cout << "run " << run.dir().string() << " (config " << hash_hex(run.hash()) << ")\n";
    if (*pretrain) {
      const auto o = run.pretrain_estimator();
      print("IND", o.ind);
      print("OOD", o.ood);
      std::cout << "OOD/IND MPJPE ratio " << o.ood.mpjpe / o.ind.mpjpe << "\n";
    } else if (*renderer) {
      const auto o = run.train_renderer();
      std::cout << "held-out PSNR " << o.holdout_psnr << " dB\n";
    } else if (*generate) {
      const auto o = run.generate(mode);
      std::cout << o.manifest.records.size() << " samples, OOD-window mass " << o.views.window_mass
                << ", baseline MPJPE on them " << o.generated_error_mm << " mm\n";
    } else if (*finetune) {
      const auto o = run.finetune(mode);
      print("IND", o.ind);
      print("OOD", o.ood);
    } else if (*evaluate) {
      const auto rows = run.evaluate(mode);
      for (const auto& [name, r] : rows) print(name, r);
      if (rows.size() == 4) {
        std::cout << "IND improvement " << percent(metrics::relative_improvement(rows[0].second.mpjpe, rows[2].second.mpjpe))
                  << ", OOD improvement "
                  << percent(metrics::relative_improvement(rows[1].second.mpjpe, rows[3].second.mpjpe)) << "\n";
      }
    } else if (*ablate) {
      const auto o = run.ablate();
      for (const auto& r : o.means)
        std::cout << r.cell << ": IND " << r.ind.mpjpe << " mm, OOD " << r.ood.mpjpe << " mm (" << r.status << ")\n";
    } else if (*exporter) {
      std::cout << "wrote " << run.export_dataset(split, mode, dest).string() << "\n";
    } else if (*report) {
      const auto o = run.report();
      for (const auto& a : o.artifacts) std::cout << "wrote " << a.string() << "\n";
      for (const auto& g : o.gaps) std::cout << "gap: " << g << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
