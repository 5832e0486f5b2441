#include "posegen/pipeline.hpp"

#include "posegen/priors.hpp"
#include "posegen/random.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace posegen::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

const SkeletonDef& skel() { return SkeletonDef::standard(); }

/// Uniform over the sphere: elevation = asin(U(-1, 1)).
CameraView sphere_view(Rng& rng) {
  const double el = std::asin(uniform(rng, -1.0, 1.0));
  return view_from_angles(el, uniform(rng, -std::numbers::pi, std::numbers::pi));
}

std::string feedback_dir(gan::FeedbackMode mode) { return gan::to_string(mode); }

std::string renderer_history_csv(const std::vector<render::NerfLossTerms>& h) {
  std::ostringstream os;
  os << "epoch,reconstruction,pose_deviation,smoothness,total\n" << std::setprecision(10);
  for (std::size_t i = 0; i < h.size(); ++i)
    os << i << "," << h[i].reconstruction << "," << h[i].pose_deviation << "," << h[i].smoothness << ","
       << h[i].total << "\n";
  return os.str();
}

std::string viewpoints_csv(const metrics::ViewpointHistogram& h) {
  std::ostringstream os;
  os << "axis,bin_lo_deg,bin_hi_deg,mass\n" << std::setprecision(10);
  const double eb = 180.0 / h.bins, ab = 360.0 / h.bins;
  for (int b = 0; b < h.bins; ++b) os << "elevation," << -90.0 + b * eb << "," << -90.0 + (b + 1) * eb << "," << h.elevation[b] << "\n";
  for (int b = 0; b < h.bins; ++b) os << "azimuth," << -180.0 + b * ab << "," << -180.0 + (b + 1) * ab << "," << h.azimuth[b] << "\n";
  return os.str();
}

std::vector<RenderedSample> samples_from(const io::DatasetManifest& m, std::size_t count) {
  std::vector<RenderedSample> out;
  count = std::min(count, m.records.size());
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& r = m.records[i];
    out.push_back({r.pixels, r.theta, r.k, r.split});
  }
  return out;
}

io::DatasetManifest manifest_from(const std::vector<RenderedSample>& data, const render::RenderConfig& rc) {
  io::DatasetManifest m;
  m.height = rc.height;
  m.width = rc.width;
  m.channels = rc.channels;
  for (const auto& s : data) m.records.push_back(io::make_record(s.image, s.theta, s.k, s.split));
  return m;
}

std::map<std::string, double> read_key_values(const fs::path& path) {
  std::map<std::string, double> out;
  std::istringstream is(io::read_text(path));
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    out[line.substr(0, eq)] = std::stod(line.substr(eq + 1));
  }
  return out;
}

const metrics::MetricsReport& find_metrics(const NamedMetrics& rows, const std::string& name, const fs::path& src) {
  for (const auto& [n, r] : rows)
    if (n == name) return r;
  throw std::runtime_error("no '" + name + "' row in " + src.string());
}

}  // namespace

// ---------------------------------------------------------------------------
// Data

std::vector<std::pair<PoseVector, CameraView>> draw_labels(const gan::JointLimits& limits, double elevation_lo,
                                                           double elevation_hi, int count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::pair<PoseVector, CameraView>> out;
  out.reserve(std::max(count, 0));
  for (int i = 0; i < count; ++i) {
    PoseVector theta = limits.sample(rng);
    out.emplace_back(theta, gan::sample_view(rng, elevation_lo, elevation_hi));
  }
  return out;
}

std::vector<RenderedSample> oracle_samples(const gan::JointLimits& limits, double elevation_lo, double elevation_hi,
                                           int count, std::uint64_t seed, const render::RenderConfig& rc,
                                           const std::string& split) {
  std::vector<RenderedSample> out;
  for (auto& [theta, k] : draw_labels(limits, elevation_lo, elevation_hi, count, seed))
    out.push_back({io::quantize16(render::oracle_render(theta, k, rc)), theta, k, split});
  return out;
}

Splits make_splits(const ExperimentConfig& cfg) {
  const auto limits = cfg.pose_limits();
  const auto rc = cfg.image_render();
  const auto& d = cfg.data;
  Splits s;
  s.pretrain = oracle_samples(limits, d.ind_elevation_lo, d.ind_elevation_hi, d.pretrain_samples,
                              derive_seed(cfg.seed, "split/pretrain"), rc, "pretrain");
  s.ind_test = oracle_samples(limits, d.ind_elevation_lo, d.ind_elevation_hi, d.test_samples,
                              derive_seed(cfg.seed, "split/ind_test"), rc, "ind_test");
  s.ood_test = oracle_samples(limits, d.ood_elevation_lo, d.ood_elevation_hi, d.test_samples,
                              derive_seed(cfg.seed, "split/ood_test"), rc, "ood_test");
  return s;
}

metrics::MetricsReport evaluate_estimator(const estimator::Estimator& est, const std::vector<RenderedSample>& data) {
  if (data.empty()) throw std::invalid_argument("evaluate_estimator: empty data");
  const auto pred = estimator::predict(est, data);
  std::vector<JointSet> x, x_hat;
  x.reserve(data.size());
  x_hat.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    x.push_back(forward_kinematics(skel(), data[i].theta));
    x_hat.push_back(forward_kinematics(skel(), pred[i]));
  }
  return metrics::evaluate(x, x_hat);
}

gan::GanConfig variant_config(const gan::GanConfig& base, const AblationCell& cell) {
  gan::GanConfig g = base;
  g.feedback.mode = cell.mode;
  g.prior = cell.prior;
  if (cell.variant == "A1") {
    g.learn_camera = false;
    g.w2 = 0.0;
  } else if (cell.variant == "A2") {
    g.learn_camera = true;
    g.w2 = 0.0;
  } else if (cell.variant == "A3") {
    g.learn_camera = true;
  } else {
    throw std::invalid_argument("unknown ablation variant " + cell.variant);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Run

Run::Run(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  dir_ = cfg_.output_dir;
  hash_ = cfg_.hash();
  fs::create_directories(dir_);
  const fs::path path = dir_ / "config.yaml";
  if (fs::exists(path)) {
    const auto existing = ExperimentConfig::load(path);
    if (existing.hash() != hash_)
      throw std::runtime_error("run directory " + dir_.string() + " holds a different configuration (hash " +
                               hash_hex(existing.hash()) + ", requested " + hash_hex(hash_) + ")");
  } else {
    cfg_.save(path);
  }
}

void Run::record(const std::string& phase, const std::vector<std::string>& artifacts,
                 const std::map<std::string, double>& metrics, double seconds) const {
  io::LedgerEntry e;
  e.phase = phase;
  e.config_hash = hash_hex(hash_);
  e.artifacts = artifacts;
  e.metrics = metrics;
  e.seconds = seconds;
  io::append_ledger(dir_, e);
}

PretrainOutcome Run::pretrain_estimator() {
  const auto t0 = Clock::now();
  const Splits splits = make_splits(cfg_);
  PretrainOutcome out;
  out.estimator = estimator::Estimator(cfg_.estimator.spec, derive_seed(cfg_.seed, "estimator/init"));
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(kPoseDim);
  for (const auto& s : splits.pretrain) mean += s.theta.values();
  out.estimator.set_output_center(mean / static_cast<double>(splits.pretrain.size()));
  out.history = estimator::train_estimator(out.estimator, splits.pretrain, cfg_.estimator.pretrain,
                                           derive_seed(cfg_.seed, "estimator/pretrain"));

  const fs::path dir = dir_ / "pretrain";
  fs::create_directories(dir);
  io::write_text(dir / "history.csv", estimator::history_csv(out.history));
  io::save_checkpoint(dir / "estimator.ckpt", "estimator", hash_, out.estimator.params);
  if (!out.history.empty() && out.history.back().mean_err >= cfg_.estimator.train_error_floor) {
    std::ostringstream msg;
    msg << "pretraining did not converge: final mean pose error " << out.history.back().mean_err
        << " >= floor " << cfg_.estimator.train_error_floor << " (see " << (dir / "history.csv").string() << ")";
    throw std::runtime_error(msg.str());
  }
  out.ind = evaluate_estimator(out.estimator, splits.ind_test);
  out.ood = evaluate_estimator(out.estimator, splits.ood_test);
  io::write_text(dir / "metrics.csv", metrics_csv({{"ind", out.ind}, {"ood", out.ood}}));
  record("pretrain-estimator", {"pretrain/estimator.ckpt", "pretrain/history.csv", "pretrain/metrics.csv"},
         {{"ind_mpjpe_mm", out.ind.mpjpe}, {"ood_mpjpe_mm", out.ood.mpjpe}, {"ood_ind_ratio", out.ood.mpjpe / out.ind.mpjpe}},
         elapsed(t0));
  return out;
}

estimator::Estimator Run::load_baseline() const {
  const fs::path path = dir_ / "pretrain" / "estimator.ckpt";
  if (!fs::exists(path)) throw std::runtime_error("no pretrained estimator in " + dir_.string() + "; run pretrain-estimator first");
  estimator::Estimator est(cfg_.estimator.spec, derive_seed(cfg_.seed, "estimator/init"));
  io::load_checkpoint(path, "estimator", hash_, est.params);
  return est;
}

RendererOutcome Run::train_renderer() {
  const auto t0 = Clock::now();
  const auto& rs = cfg_.renderer;
  render::NerfDataset ds;
  ds.poses = gan::RealPoseCorpus::build(cfg_.pose_limits(), rs.poses, derive_seed(cfg_.seed, "renderer/poses")).poses;
  Rng rng(derive_seed(cfg_.seed, "renderer/views"));
  for (int p = 0; p < rs.poses; ++p)
    for (int v = 0; v < rs.views; ++v) {
      const CameraView k = sphere_view(rng);
      ds.images.push_back(render::oracle_render(ds.poses[p], k, rs.render));
      ds.frame.push_back(p);
      ds.views.push_back(k);
    }
  auto res = render::train_nerf(ds, rs.field, rs.train, rs.render, derive_seed(cfg_.seed, "renderer/train"));

  const fs::path dir = dir_ / "renderer";
  fs::create_directories(dir);
  io::save_checkpoint(dir / "field.ckpt", "field", hash_, res.field.params());
  io::write_text(dir / "history.csv", renderer_history_csv(res.history));
  std::ostringstream ps;
  ps << std::setprecision(10) << "holdout_psnr_db=" << res.holdout_psnr << "\n";
  io::write_text(dir / "psnr.txt", ps.str());
  record("train-renderer", {"renderer/field.ckpt", "renderer/history.csv", "renderer/psnr.txt"},
         {{"holdout_psnr_db", res.holdout_psnr}}, elapsed(t0));
  if (!res.success) throw std::runtime_error("renderer training failed: " + res.diagnostic);
  return {std::move(res.field), res.holdout_psnr, std::move(res.history)};
}

render::RadianceField Run::load_renderer() const {
  const fs::path path = dir_ / "renderer" / "field.ckpt";
  if (!fs::exists(path)) throw std::runtime_error("no renderer in " + dir_.string() + "; run train-renderer first");
  render::RadianceField field(cfg_.renderer.field, skel(), derive_seed(cfg_.seed, "renderer/train"));
  io::load_checkpoint(path, "field", hash_, field.params());
  return field;
}

GenerateOutcome Run::generate_into(const fs::path& out, const GenerateSpec& spec, const estimator::Estimator& est,
                                   const render::RadianceField& field, std::uint64_t seed) {
  const auto t0 = Clock::now();
  gan::GanConfig gc = spec.gan;
  gc.fixed_elevation_lo = cfg_.data.ind_elevation_lo;
  gc.fixed_elevation_hi = cfg_.data.ind_elevation_hi;
  const auto rc = cfg_.image_render();

  const auto corpus = gan::RealPoseCorpus::build(cfg_.pose_limits(), cfg_.data.corpus_size, derive_seed(seed, "gan/corpus"));
  gan::Generator gen(cfg_.gan.generator, derive_seed(seed, "gan/generator"));
  gan::Discriminator disc(cfg_.gan.discriminator, derive_seed(seed, "gan/discriminator"));
  estimator::Estimator frozen = est;  // interleaved training updates this copy only
  gan::GanContext ctx{&field, rc, &frozen, &corpus};
  auto res = gan::train_gan(std::move(gen), std::move(disc), ctx, gc, derive_seed(seed, "gan/train"));

  GenerateOutcome o;
  o.generator = res.generator;
  o.history = std::move(res.history);
  o.manifest.height = rc.height;
  o.manifest.width = rc.width;
  o.manifest.channels = rc.channels;
  std::vector<CameraView> views;
  if (spec.samples > 0) {
    const Eigen::MatrixXd z =
        sample_latent(gc.prior, cfg_.gan.generator.latent_dim, spec.samples, derive_seed(seed, "gan/sample"));
    auto [theta, k] = o.generator.sample(z);
    if (!gc.learn_camera) {
      Rng vr(derive_seed(seed, "gan/sample_views"));
      for (Eigen::Index i = 0; i < k.rows(); ++i)
        k.row(i) = gan::sample_view(vr, gc.fixed_elevation_lo, gc.fixed_elevation_hi).values().transpose();
    }
    for (Eigen::Index i = 0; i < theta.rows(); ++i) {
      const PoseVector th(theta.row(i).transpose());
      const CameraView kv(k.row(i).transpose());
      const auto img = io::quantize16(render::render(th, kv, field, rc));
      o.manifest.records.push_back(io::make_record(img, th, kv, "generated"));
      views.push_back(kv);
    }
  }
  const auto& d = cfg_.data;
  if (!views.empty()) {
    o.views = metrics::viewpoint_histogram(views, 18, d.ood_elevation_lo, d.ood_elevation_hi);
    o.generated_error_mm = evaluate_estimator(est, samples_from(o.manifest, views.size())).mpjpe;
  }

  fs::create_directories(out);
  io::export_dataset(o.manifest, out / "dataset");
  io::save_checkpoint(out / "generator.ckpt", "generator", hash_, o.generator.params());
  io::save_checkpoint(out / "discriminator.ckpt", "discriminator", hash_, res.discriminator.params());
  io::write_text(out / "gan_history.csv", gan::history_csv(o.history));
  io::write_text(out / "viewpoints.csv", viewpoints_csv(o.views));
  std::ostringstream st;
  st << std::setprecision(10) << "samples=" << views.size() << "\nood_window_mass=" << o.views.window_mass
     << "\ngenerated_mpjpe_mm=" << o.generated_error_mm << "\n";
  io::write_text(out / "stats.txt", st.str());

  const auto rel = [&](const std::string& f) { return fs::relative(out / f, dir_).generic_string(); };
  record("generate", {rel("dataset"), rel("generator.ckpt"), rel("gan_history.csv"), rel("viewpoints.csv")},
         {{"samples", static_cast<double>(views.size())},
          {"ood_window_mass", o.views.window_mass},
          {"generated_mpjpe_mm", o.generated_error_mm}},
         elapsed(t0));
  return o;
}

GenerateOutcome Run::generate(gan::FeedbackMode mode) {
  const auto est = load_baseline();
  const auto field = load_renderer();
  GenerateSpec spec;
  spec.gan = cfg_.gan.train;
  spec.gan.feedback.mode = mode;
  spec.samples = cfg_.data.generate_samples;
  return generate_into(dir_ / "generate" / feedback_dir(mode), spec, est, field, cfg_.seed);
}

FinetuneOutcome Run::finetune_from(const fs::path& out, const estimator::Estimator& baseline,
                                   const io::DatasetManifest& generated, std::size_t count, const Splits& splits,
                                   const metrics::MetricsReport& baseline_ood, std::uint64_t seed) {
  const auto t0 = Clock::now();
  auto data = samples_from(generated, count);
  const std::size_t used = data.size();
  if (cfg_.estimator.replay && used > 0) {
    const auto want = static_cast<std::size_t>(std::llround(cfg_.estimator.replay_ratio * static_cast<double>(used)));
    std::vector<std::size_t> idx(splits.pretrain.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "finetune/replay"));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < std::min(want, idx.size()); ++i) data.push_back(splits.pretrain[idx[i]]);
  }
  FinetuneOutcome o;
  o.estimator = baseline;
  if (!data.empty())
    o.history = estimator::train_estimator(o.estimator, data, cfg_.estimator.finetune, derive_seed(seed, "finetune/train"));
  o.ind = evaluate_estimator(o.estimator, splits.ind_test);
  o.ood = evaluate_estimator(o.estimator, splits.ood_test);

  fs::create_directories(out);
  io::write_text(out / "history.csv", estimator::history_csv(o.history));
  if (o.ood.mpjpe > 2.0 * baseline_ood.mpjpe) {
    std::ostringstream msg;
    msg << "fine-tuning diverged: OOD MPJPE " << o.ood.mpjpe << " mm exceeds twice the baseline "
        << baseline_ood.mpjpe << " mm";
    throw std::runtime_error(msg.str());
  }
  io::save_checkpoint(out / "estimator.ckpt", "estimator", hash_, o.estimator.params);
  io::write_text(out / "metrics.csv", metrics_csv({{"ind", o.ind}, {"ood", o.ood}}));
  const auto rel = [&](const std::string& f) { return fs::relative(out / f, dir_).generic_string(); };
  record("finetune", {rel("estimator.ckpt"), rel("history.csv"), rel("metrics.csv")},
         {{"generated_samples", static_cast<double>(used)},
          {"ind_mpjpe_mm", o.ind.mpjpe},
          {"ood_mpjpe_mm", o.ood.mpjpe},
          {"ood_improvement_pct", metrics::relative_improvement(baseline_ood.mpjpe, o.ood.mpjpe)}},
         elapsed(t0));
  return o;
}

FinetuneOutcome Run::finetune(gan::FeedbackMode mode) {
  const auto baseline = load_baseline();
  const fs::path src = dir_ / "generate" / feedback_dir(mode) / "dataset";
  if (!fs::exists(src)) throw std::runtime_error("no generated dataset at " + src.string() + "; run generate first");
  const auto manifest = io::import_dataset(src, cfg_.data.image_size, cfg_.data.image_size);
  const Splits splits = make_splits(cfg_);
  const auto base_ood = evaluate_estimator(baseline, splits.ood_test);
  return finetune_from(dir_ / "finetune" / feedback_dir(mode), baseline, manifest, manifest.records.size(), splits,
                       base_ood, cfg_.seed);
}

NamedMetrics Run::evaluate(gan::FeedbackMode mode) {
  const auto t0 = Clock::now();
  const Splits splits = make_splits(cfg_);
  const auto baseline = load_baseline();
  NamedMetrics rows{{"baseline_ind", evaluate_estimator(baseline, splits.ind_test)},
                    {"baseline_ood", evaluate_estimator(baseline, splits.ood_test)}};
  const fs::path ft = dir_ / "finetune" / feedback_dir(mode) / "estimator.ckpt";
  if (fs::exists(ft)) {
    estimator::Estimator est(cfg_.estimator.spec, 0);
    io::load_checkpoint(ft, "estimator", hash_, est.params);
    rows.emplace_back("finetuned_ind", evaluate_estimator(est, splits.ind_test));
    rows.emplace_back("finetuned_ood", evaluate_estimator(est, splits.ood_test));
  }
  const fs::path out = dir_ / "evaluate" / ("metrics_" + feedback_dir(mode) + ".csv");
  fs::create_directories(out.parent_path());
  io::write_text(out, metrics_csv(rows));
  std::map<std::string, double> m;
  for (const auto& [name, r] : rows) m[name + "_mpjpe_mm"] = r.mpjpe;
  record("evaluate", {fs::relative(out, dir_).generic_string()}, m, elapsed(t0));
  return rows;
}

// ---------------------------------------------------------------------------
// Ablation

namespace {

std::string group_key(const AblationCell& c) { return c.variant + "-" + gan::to_string(c.mode) + "-" + to_string(c.prior); }

AblationRow row_for(const AblationCell& c, std::uint64_t seed) {
  AblationRow r;
  r.cell = c.name;
  r.variant = c.variant;
  r.mode = gan::to_string(c.mode);
  r.prior = to_string(c.prior);
  r.samples = c.samples;
  r.seed = seed;
  return r;
}

bool cached_generation(const fs::path& dir, std::uint64_t hash) {
  if (!fs::exists(dir / "dataset" / "MANIFEST.sha") || !fs::exists(dir / "generator.ckpt") || !fs::exists(dir / "stats.txt"))
    return false;
  return io::read_checkpoint(dir / "generator.ckpt").config_hash == hash;
}

bool cached_cell(const fs::path& dir, std::uint64_t hash) {
  if (!fs::exists(dir / "metrics.csv") || !fs::exists(dir / "estimator.ckpt")) return false;
  return io::read_checkpoint(dir / "estimator.ckpt").config_hash == hash;
}

std::vector<AblationRow> seed_means(const std::vector<AblationRow>& rows) {
  std::vector<AblationRow> means;
  std::map<std::string, std::pair<std::size_t, int>> index;  // cell -> (position, seeds seen)
  for (const auto& r : rows) {
    auto it = index.find(r.cell);
    if (it == index.end()) {
      AblationRow m = r;
      m.seed = 0;
      m.ind = {};
      m.ood = {};
      m.ood_window_mass = 0.0;
      m.status = "";
      it = index.emplace(r.cell, std::make_pair(means.size(), 0)).first;
      means.push_back(m);
    }
    it->second.second += 1;
    if (r.status != "ok") continue;
    auto& m = means[it->second.first];
    const auto add = [](metrics::MetricsReport& acc, const metrics::MetricsReport& x) {
      acc.mpjpe += x.mpjpe;
      acc.pa_mpjpe += x.pa_mpjpe;
      acc.pck += x.pck;
      acc.n_samples += x.n_samples;
      acc.threshold_mm = x.threshold_mm;
    };
    add(m.ind, r.ind);
    add(m.ood, r.ood);
    m.ood_window_mass += r.ood_window_mass;
    m.seed += 1;  // count of successful seeds, reset below
  }
  for (auto& m : means) {
    const int seen = index[m.cell].second;
    const auto ok = static_cast<int>(m.seed);
    if (ok > 0) {
      for (auto* r : {&m.ind, &m.ood}) {
        r->mpjpe /= ok;
        r->pa_mpjpe /= ok;
        r->pck /= ok;
      }
      m.ood_window_mass /= ok;
    }
    m.status = ok == seen ? "ok" : std::to_string(ok) + "/" + std::to_string(seen) + " seeds ok";
    m.seed = 0;
  }
  return means;
}

}  // namespace

AblationOutcome Run::ablate() {
  const auto t0 = Clock::now();
  const auto field = load_renderer();
  const auto cells = cfg_.ablation.resolved();
  AblationOutcome out;

  for (std::uint64_t seed : cfg_.ablation.seeds) {
    ExperimentConfig sc = cfg_;
    sc.seed = seed;
    sc.output_dir = (dir_ / "ablate" / ("seed_" + std::to_string(seed))).string();
    Run sub(sc);
    AblationCell base_cell{"baseline", "none", gan::FeedbackMode::ood, PriorKind::normal, 0};
    AblationRow base_row = row_for(base_cell, seed);
    base_row.variant = "baseline";
    base_row.mode = base_row.prior = "-";

    estimator::Estimator baseline;
    Splits splits;
    try {
      baseline = fs::exists(sub.dir() / "pretrain" / "estimator.ckpt") ? sub.load_baseline()
                                                                         : sub.pretrain_estimator().estimator;
      splits = make_splits(sc);
      base_row.ind = evaluate_estimator(baseline, splits.ind_test);
      base_row.ood = evaluate_estimator(baseline, splits.ood_test);
    } catch (const std::exception& e) {
      base_row.status = std::string("failed: ") + e.what();
      out.rows.push_back(base_row);
      for (const auto& c : cells) {
        auto r = row_for(c, seed);
        r.status = "skipped: baseline failed";
        out.rows.push_back(r);
      }
      continue;
    }
    out.rows.push_back(base_row);

    std::map<std::string, int> largest;
    for (const auto& c : cells) largest[group_key(c)] = std::max(largest[group_key(c)], c.samples);

    std::map<std::string, io::DatasetManifest> datasets;
    std::map<std::string, double> window_mass;
    std::map<std::string, std::string> failures;
    for (const auto& c : cells) {
      const std::string key = group_key(c);
      if (datasets.count(key) || failures.count(key)) continue;
      const fs::path gdir = sub.dir() / "gan" / key;
      try {
        if (!cached_generation(gdir, sub.hash())) {
          GenerateSpec spec;
          spec.gan = variant_config(sc.gan.train, c);
          spec.samples = largest[key];
          sub.generate_into(gdir, spec, baseline, field, seed);
        }
        datasets[key] = io::import_dataset(gdir / "dataset", sc.data.image_size, sc.data.image_size);
        window_mass[key] = read_key_values(gdir / "stats.txt").at("ood_window_mass");
      } catch (const std::exception& e) {
        failures[key] = std::string("failed: generation: ") + e.what();
      }
    }

    for (const auto& c : cells) {
      const std::string key = group_key(c);
      AblationRow r = row_for(c, seed);
      if (failures.count(key)) {
        r.status = failures[key];
        out.rows.push_back(r);
        continue;
      }
      r.ood_window_mass = window_mass[key];
      const fs::path cdir = sub.dir() / "cells" / c.name;
      try {
        if (!cached_cell(cdir, sub.hash()))
          sub.finetune_from(cdir, baseline, datasets[key], static_cast<std::size_t>(c.samples), splits, base_row.ood, seed);
        const auto rows = read_metrics_csv(io::read_text(cdir / "metrics.csv"));
        r.ind = find_metrics(rows, "ind", cdir);
        r.ood = find_metrics(rows, "ood", cdir);
      } catch (const std::exception& e) {
        r.status = std::string("failed: ") + e.what();
      }
      out.rows.push_back(r);
    }
  }

  out.means = seed_means(out.rows);
  const fs::path dir = dir_ / "ablate";
  fs::create_directories(dir);
  io::write_text(dir / "ablation.csv", ablation_csv(out.rows));
  io::write_text(dir / "ablation_means.csv", ablation_csv(out.means));
  std::map<std::string, double> m;
  for (const auto& r : out.means)
    if (r.status == "ok") m[r.cell + "_ood_mpjpe_mm"] = r.ood.mpjpe;
  record("ablate", {"ablate/ablation.csv", "ablate/ablation_means.csv"}, m, elapsed(t0));
  return out;
}

// ---------------------------------------------------------------------------
// Export and report

fs::path Run::export_dataset(const std::string& split, gan::FeedbackMode mode, const fs::path& dest) {
  const auto t0 = Clock::now();
  io::DatasetManifest m;
  if (split == "generated") {
    const fs::path src = dir_ / "generate" / feedback_dir(mode) / "dataset";
    if (!fs::exists(src)) throw std::runtime_error("no generated dataset at " + src.string() + "; run generate first");
    m = io::import_dataset(src);
  } else {
    const Splits s = make_splits(cfg_);
    const auto rc = cfg_.image_render();
    if (split == "pretrain")
      m = manifest_from(s.pretrain, rc);
    else if (split == "ind_test")
      m = manifest_from(s.ind_test, rc);
    else if (split == "ood_test")
      m = manifest_from(s.ood_test, rc);
    else
      throw std::invalid_argument("unknown split '" + split + "' (expected generated, pretrain, ind_test or ood_test)");
  }
  io::export_dataset(m, dest);
  record("export-dataset", {dest.string()}, {{"records", static_cast<double>(m.records.size())}}, elapsed(t0));
  return dest;
}

ReportOutcome Run::report() {
  const auto t0 = Clock::now();
  auto out = write_report(dir_);
  std::vector<std::string> arts;
  for (const auto& p : out.artifacts) arts.push_back(fs::relative(p, dir_).generic_string());
  record("report", arts, {{"gaps", static_cast<double>(out.gaps.size())}}, elapsed(t0));
  return out;
}

// ---------------------------------------------------------------------------
// CSV

std::string metrics_csv(const NamedMetrics& rows) {
  std::ostringstream os;
  os << "name," << metrics::MetricsReport::csv_header() << "\n";
  for (const auto& [name, r] : rows) os << name << "," << r.csv_row() << "\n";
  return os.str();
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

metrics::MetricsReport parse_report(const std::vector<std::string>& f, std::size_t at) {
  metrics::MetricsReport r;
  r.mpjpe = std::stod(f.at(at));
  r.pa_mpjpe = std::stod(f.at(at + 1));
  r.pck = std::stod(f.at(at + 2));
  return r;
}

}  // namespace

NamedMetrics read_metrics_csv(const std::string& text) {
  NamedMetrics rows;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 6) throw std::runtime_error("malformed metrics row: " + line);
    auto r = parse_report(f, 1);
    r.n_samples = std::stol(f[4]);
    r.threshold_mm = std::stod(f[5]);
    rows.emplace_back(f[0], r);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "cell,variant,mode,prior,samples,seed,ind_mpjpe_mm,ind_pa_mpjpe_mm,ind_pck,ood_mpjpe_mm,ood_pa_mpjpe_mm,"
        "ood_pck,ood_window_mass,status\n"
     << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    os << r.cell << "," << r.variant << "," << r.mode << "," << r.prior << "," << r.samples << "," << r.seed << ","
       << r.ind.mpjpe << "," << r.ind.pa_mpjpe << "," << r.ind.pck << "," << r.ood.mpjpe << "," << r.ood.pa_mpjpe
       << "," << r.ood.pck << "," << r.ood_window_mass << "," << status << "\n";
  }
  return os.str();
}

std::vector<AblationRow> read_ablation_csv(const std::string& text) {
  std::vector<AblationRow> rows;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 14) throw std::runtime_error("malformed ablation row: " + line);
    AblationRow r;
    r.cell = f[0];
    r.variant = f[1];
    r.mode = f[2];
    r.prior = f[3];
    r.samples = std::stoi(f[4]);
    r.seed = std::stoull(f[5]);
    r.ind = parse_report(f, 6);
    r.ood = parse_report(f, 9);
    r.ood_window_mass = std::stod(f[12]);
    r.status = f[13];
    rows.push_back(r);
  }
  return rows;
}

std::string percent(double value) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << value << "%";
  return os.str();
}

}  // namespace posegen::pipeline
