#include "posegen/pipeline.hpp"

#include "posegen/random.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>

namespace posegen::pipeline {

namespace {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  cv::Scalar color;
};

std::string fmt(double v, int digits = 1) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

/// Line chart with axes, tick labels and a legend.
cv::Mat line_chart(const std::vector<Series>& series, const std::string& x_title, const std::string& y_title,
                   double x_lo, double x_hi, double y_lo, double y_hi) {
  const int w = 720, h = 440, left = 70, right = 170, top = 20, bottom = 60;
  cv::Mat img(h, w, CV_8UC3, cv::Scalar(255, 255, 255));
  if (y_hi <= y_lo) y_hi = y_lo + 1.0;
  if (x_hi <= x_lo) x_hi = x_lo + 1.0;
  const auto px = [&](double x) { return left + (x - x_lo) / (x_hi - x_lo) * (w - left - right); };
  const auto py = [&](double y) { return h - bottom - (y - y_lo) / (y_hi - y_lo) * (h - top - bottom); };
  const cv::Scalar axis(60, 60, 60), grid(225, 225, 225);
  for (int t = 0; t <= 5; ++t) {
    const double xv = x_lo + t * (x_hi - x_lo) / 5, yv = y_lo + t * (y_hi - y_lo) / 5;
    cv::line(img, {static_cast<int>(px(xv)), top}, {static_cast<int>(px(xv)), h - bottom}, grid);
    cv::line(img, {left, static_cast<int>(py(yv))}, {w - right, static_cast<int>(py(yv))}, grid);
    cv::putText(img, fmt(xv, std::abs(x_hi - x_lo) < 10 ? 1 : 0), {static_cast<int>(px(xv)) - 14, h - bottom + 18},
                cv::FONT_HERSHEY_SIMPLEX, 0.4, axis);
    cv::putText(img, fmt(yv, std::abs(y_hi - y_lo) < 10 ? 2 : 0), {8, static_cast<int>(py(yv)) + 4},
                cv::FONT_HERSHEY_SIMPLEX, 0.4, axis);
  }
  cv::rectangle(img, {left, top}, {w - right, h - bottom}, axis);
  cv::putText(img, x_title, {left + 120, h - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.5, axis);
  cv::putText(img, y_title, {left + 4, top + 14}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis);
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& sr = series[s];
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < sr.x.size(); ++i)
      pts.emplace_back(static_cast<int>(std::lround(px(sr.x[i]))), static_cast<int>(std::lround(py(sr.y[i]))));
    if (pts.size() > 1) cv::polylines(img, pts, false, sr.color, 2, cv::LINE_AA);
    for (const auto& p : pts) cv::circle(img, p, 3, sr.color, cv::FILLED, cv::LINE_AA);
    const int ly = top + 20 + 22 * static_cast<int>(s);
    cv::line(img, {w - right + 12, ly - 4}, {w - right + 36, ly - 4}, sr.color, 2);
    cv::putText(img, sr.label, {w - right + 42, ly}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis);
  }
  return img;
}

void save_png(const fs::path& path, const cv::Mat& img) {
  fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write " + path.string());
}

/// Generated dataset from the main run, else the first ablation seed's full-objective OOD cell.
std::optional<fs::path> generated_dataset(const fs::path& run, const ExperimentConfig& cfg) {
  const fs::path main = run / "generate" / "ood" / "dataset";
  if (fs::exists(main / "MANIFEST.sha")) return main;
  for (auto seed : cfg.ablation.seeds) {
    const fs::path p = run / "ablate" / ("seed_" + std::to_string(seed)) / "gan" / "A3-ood-normal" / "dataset";
    if (fs::exists(p / "MANIFEST.sha")) return p;
  }
  return std::nullopt;
}

/// Estimator-resolution render scaled up, with the projected skeleton drawn on top.
cv::Mat annotated_tile(const io::DatasetRecord& r, const render::RenderConfig& rc, int scale) {
  cv::Mat small(r.pixels.height, r.pixels.width, CV_8UC3);
  for (int y = 0; y < r.pixels.height; ++y)
    for (int x = 0; x < r.pixels.width; ++x) {
      const auto at = [&](int c) { return cv::saturate_cast<uchar>(255.0 * r.pixels.at(y, x, std::min(c, r.pixels.channels - 1))); };
      small.at<cv::Vec3b>(y, x) = {at(2), at(1), at(0)};
    }
  cv::Mat tile;
  cv::resize(small, tile, {}, scale, scale, cv::INTER_NEAREST);
  const auto cam = camera_extrinsics(r.k, rc.radius);
  const double f = rc.focal();
  std::vector<cv::Point> uv;
  for (Eigen::Index j = 0; j < r.joints.rows(); ++j) {
    const Eigen::Vector3d p = cam.apply(r.joints.row(j).transpose());
    const double u = f * p.x() / p.z() + 0.5 * rc.width, v = f * p.y() / p.z() + 0.5 * rc.height;
    uv.emplace_back(static_cast<int>(std::lround(u * scale)), static_cast<int>(std::lround(v * scale)));
  }
  const auto& skel = SkeletonDef::standard();
  for (int j = 1; j < skel.joint_count(); ++j)
    cv::line(tile, uv[skel.parent(j)], uv[j], cv::Scalar(40, 200, 255), 1, cv::LINE_AA);
  for (const auto& p : uv) cv::circle(tile, p, 2, cv::Scalar(0, 0, 230), cv::FILLED, cv::LINE_AA);
  return tile;
}

}  // namespace

ReportOutcome write_report(const fs::path& run) {
  if (!fs::exists(run / "config.yaml")) throw std::runtime_error("no config.yaml in " + run.string());
  const auto cfg = ExperimentConfig::load(run / "config.yaml");
  const fs::path dir = run / "report";
  fs::create_directories(dir);
  ReportOutcome out;
  const auto& d = cfg.data;

  // Viewpoint distributions.
  const auto generated = generated_dataset(run, cfg);
  std::optional<io::DatasetManifest> gen;
  if (generated) gen = io::import_dataset(*generated);
  {
    std::vector<CameraView> train, ood;
    for (const auto& [t, k] : draw_labels(cfg.pose_limits(), d.ind_elevation_lo, d.ind_elevation_hi,
                                          d.pretrain_samples, derive_seed(cfg.seed, "split/pretrain")))
      train.push_back(k);
    for (const auto& [t, k] : draw_labels(cfg.pose_limits(), d.ood_elevation_lo, d.ood_elevation_hi, d.test_samples,
                                          derive_seed(cfg.seed, "split/ood_test")))
      ood.push_back(k);
    std::vector<CameraView> fake;
    if (gen)
      for (const auto& r : gen->records) fake.push_back(r.k);
    else
      out.gaps.push_back("generated viewpoints: no generated dataset (run generate or ablate)");

    const int bins = 18;
    const auto ht = metrics::viewpoint_histogram(train, bins, d.ood_elevation_lo, d.ood_elevation_hi);
    const auto ho = metrics::viewpoint_histogram(ood, bins, d.ood_elevation_lo, d.ood_elevation_hi);
    std::optional<metrics::ViewpointHistogram> hg;
    if (!fake.empty()) hg = metrics::viewpoint_histogram(fake, bins, d.ood_elevation_lo, d.ood_elevation_hi);

    std::ostringstream csv;
    csv << "bin_lo_deg,bin_hi_deg,train,generated,ood_test\n" << std::setprecision(10);
    std::vector<double> centers;
    for (int b = 0; b < bins; ++b) {
      const double lo = -90.0 + b * 180.0 / bins, hi = lo + 180.0 / bins;
      centers.push_back(0.5 * (lo + hi));
      csv << lo << "," << hi << "," << ht.elevation[b] << "," << (hg ? std::to_string(hg->elevation[b]) : "") << ","
          << ho.elevation[b] << "\n";
    }
    io::write_text(dir / "viewpoints.csv", csv.str());
    std::vector<Series> s{{"train", centers, ht.elevation, {200, 120, 30}}, {"OOD test", centers, ho.elevation, {40, 40, 220}}};
    if (hg) s.push_back({"generated", centers, hg->elevation, {40, 160, 40}});
    double ymax = 0.0;
    for (const auto& sr : s) ymax = std::max(ymax, *std::max_element(sr.y.begin(), sr.y.end()));
    save_png(dir / "viewpoints.png", line_chart(s, "camera elevation (deg)", "mass per bin", -90, 90, 0, ymax * 1.05));
    out.artifacts.push_back(dir / "viewpoints.csv");
    out.artifacts.push_back(dir / "viewpoints.png");
  }

  // Sample grid.
  if (gen && !gen->records.empty()) {
    const auto rc = cfg.image_render();
    const int side = 4, scale = 4;
    const int th = rc.height * scale, tw = rc.width * scale;
    cv::Mat grid(side * th, side * tw, CV_8UC3, cv::Scalar(0, 0, 0));
    for (int i = 0; i < side * side && i < static_cast<int>(gen->records.size()); ++i)
      annotated_tile(gen->records[i], rc, scale).copyTo(grid(cv::Rect((i % side) * tw, (i / side) * th, tw, th)));
    save_png(dir / "grid.png", grid);
    out.artifacts.push_back(dir / "grid.png");
  } else if (gen) {
    out.gaps.push_back("sample grid: generated dataset is empty");
  } else {
    out.gaps.push_back("sample grid: no generated dataset");
  }

  // Summary of the main run.
  std::ostringstream summary;
  summary << "name,ind_mpjpe_mm,ood_mpjpe_mm,ind_improvement,ood_improvement,status\n";
  std::optional<metrics::MetricsReport> base_ind, base_ood;
  if (fs::exists(run / "pretrain" / "metrics.csv")) {
    const auto rows = read_metrics_csv(io::read_text(run / "pretrain" / "metrics.csv"));
    for (const auto& [n, r] : rows) {
      if (n == "ind") base_ind = r;
      if (n == "ood") base_ood = r;
    }
  }
  if (base_ind && base_ood) {
    summary << "baseline," << fmt(base_ind->mpjpe, 2) << "," << fmt(base_ood->mpjpe, 2) << ",0.0%,0.0%,ok\n";
    for (const char* mode : {"ood", "ind"}) {
      const fs::path m = run / "finetune" / mode / "metrics.csv";
      if (!fs::exists(m)) {
        out.gaps.push_back(std::string("finetuned-") + mode + ": not run");
        continue;
      }
      const auto rows = read_metrics_csv(io::read_text(m));
      metrics::MetricsReport ri, ro;
      for (const auto& [n, r] : rows) (n == "ind" ? ri : ro) = r;
      summary << "finetuned-" << mode << "," << fmt(ri.mpjpe, 2) << "," << fmt(ro.mpjpe, 2) << ","
              << percent(metrics::relative_improvement(base_ind->mpjpe, ri.mpjpe)) << ","
              << percent(metrics::relative_improvement(base_ood->mpjpe, ro.mpjpe)) << ",ok\n";
    }
  } else {
    out.gaps.push_back("baseline: pretrain-estimator not run");
  }

  // Ablation summary and size curve.
  const fs::path means_path = run / "ablate" / "ablation_means.csv";
  if (fs::exists(means_path)) {
    const auto means = read_ablation_csv(io::read_text(means_path));
    const AblationRow* base = nullptr;
    for (const auto& r : means)
      if (r.cell == "baseline") base = &r;
    for (const auto& r : means) {
      if (&r == base) continue;
      summary << "ablation:" << r.cell << "," << fmt(r.ind.mpjpe, 2) << "," << fmt(r.ood.mpjpe, 2) << ",";
      if (base && r.status == "ok")
        summary << percent(metrics::relative_improvement(base->ind.mpjpe, r.ind.mpjpe)) << ","
                << percent(metrics::relative_improvement(base->ood.mpjpe, r.ood.mpjpe));
      else
        summary << ",";
      summary << "," << r.status << "\n";
    }
    if (base) {
      summary << "ablation:baseline," << fmt(base->ind.mpjpe, 2) << "," << fmt(base->ood.mpjpe, 2) << ",0.0%,0.0%,"
              << base->status << "\n";
      Series curve{"A3 ood, normal prior", {0.0}, {base->ood.mpjpe}, {200, 80, 20}};
      std::vector<std::pair<int, double>> pts;
      for (const auto& r : means)
        if (r.variant == "A3" && r.mode == "ood" && r.prior == "normal" && r.status == "ok")
          pts.emplace_back(r.samples, r.ood.mpjpe);
      std::sort(pts.begin(), pts.end());
      for (const auto& [n, e] : pts) {
        curve.x.push_back(n);
        curve.y.push_back(e);
      }
      std::ostringstream csv;
      csv << "samples,ood_mpjpe_mm\n" << std::setprecision(10);
      for (std::size_t i = 0; i < curve.x.size(); ++i) csv << curve.x[i] << "," << curve.y[i] << "\n";
      io::write_text(dir / "size_curve.csv", csv.str());
      const auto [lo, hi] = std::minmax_element(curve.y.begin(), curve.y.end());
      const double pad = std::max(1.0, 0.1 * (*hi - *lo));
      save_png(dir / "size_curve.png", line_chart({curve}, "generated samples", "OOD MPJPE (mm)", 0.0,
                                                  std::max(1.0, curve.x.back()), *lo - pad, *hi + pad));
      out.artifacts.push_back(dir / "size_curve.csv");
      out.artifacts.push_back(dir / "size_curve.png");
      if (pts.empty()) out.gaps.push_back("size curve: no successful A3 ood normal-prior cells");
    } else {
      out.gaps.push_back("ablation: no baseline row");
    }
  } else {
    out.gaps.push_back("ablation: not run (size curve unavailable)");
  }
  io::write_text(dir / "summary.csv", summary.str());
  out.artifacts.push_back(dir / "summary.csv");

  std::ostringstream gaps;
  for (const auto& g : out.gaps) gaps << g << "\n";
  io::write_text(dir / "gaps.txt", gaps.str());
  out.artifacts.push_back(dir / "gaps.txt");
  return out;
}

}  // namespace posegen::pipeline
