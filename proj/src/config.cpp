#include "posegen/config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

namespace posegen::pipeline {

std::vector<AblationCell> AblationSection::default_cells() {
  using gan::FeedbackMode;
  return {
      {"A1", "A1", FeedbackMode::ood, PriorKind::normal, 2000},
      {"A2", "A2", FeedbackMode::ood, PriorKind::normal, 2000},
      {"A3-ood", "A3", FeedbackMode::ood, PriorKind::normal, 2000},
      {"A3-ind", "A3", FeedbackMode::ind, PriorKind::normal, 2000},
      {"A3-uniform", "A3", FeedbackMode::ood, PriorKind::uniform, 2000},
      {"A3-spherical", "A3", FeedbackMode::ood, PriorKind::spherical, 2000},
      {"A3-ood-1000", "A3", FeedbackMode::ood, PriorKind::normal, 1000},
      {"A3-ood-500", "A3", FeedbackMode::ood, PriorKind::normal, 500},
  };
}

std::vector<AblationCell> AblationSection::resolved() const {
  if (!full_grid) return cells.empty() ? default_cells() : cells;
  std::vector<AblationCell> out;
  for (const char* v : {"A1", "A2", "A3"})
    for (auto m : {gan::FeedbackMode::ind, gan::FeedbackMode::ood})
      for (auto p : {PriorKind::normal, PriorKind::uniform, PriorKind::spherical})
        for (int n : sizes) {
          AblationCell c;
          c.variant = v;
          c.mode = m;
          c.prior = p;
          c.samples = n;
          c.name = std::string(v) + "-" + gan::to_string(m) + "-" + to_string(p) + "-" + std::to_string(n);
          out.push_back(c);
        }
  return out;
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("config: " + what);
}

}  // namespace

void ExperimentConfig::validate() const {
  const auto& d = data;
  require(d.pose_fraction > 0.0 && d.pose_fraction <= 1.0, "data.pose_fraction must be in (0, 1]");
  require(d.corpus_size >= 1 && d.pretrain_samples >= 1 && d.test_samples >= 1, "data counts must be >= 1");
  require(d.generate_samples >= 0, "data.generate_samples must be >= 0");
  require(d.ind_elevation_lo <= d.ind_elevation_hi && d.ood_elevation_lo <= d.ood_elevation_hi,
          "elevation windows must have lo <= hi");
  require(d.ind_elevation_hi < d.ood_elevation_lo || d.ood_elevation_hi < d.ind_elevation_lo,
          "IND and OOD elevation windows must be disjoint");
  require(d.ind_elevation_lo >= -90.0 && d.ood_elevation_hi <= 90.0 && d.ind_elevation_hi <= 90.0 &&
              d.ood_elevation_lo >= -90.0,
          "elevations must lie in [-90, 90]");
  renderer.render.validate();
  renderer.train.validate();
  require(renderer.poses >= 1 && renderer.views >= 2, "renderer needs >= 1 pose and >= 2 views");
  require(renderer.field.channels == renderer.render.channels, "renderer.field.channels must match render channels");
  auto spec = estimator.spec;
  spec.validate();
  require(spec.height == d.image_size && spec.width == d.image_size, "estimator image size must equal data.image_size");
  require(spec.channels == renderer.render.channels, "estimator channels must match render channels");
  estimator.pretrain.validate();
  estimator.finetune.validate();
  require(estimator.replay_ratio >= 0.0, "estimator.replay_ratio must be >= 0");
  gan.train.validate();
  require(gan.generator.latent_dim >= 1, "gan.latent_dim must be >= 1");
  require(gan.generator.k_max > 0.0, "gan.k_max must be positive");
  require(!ablation.seeds.empty(), "ablation.seeds must not be empty");
  for (const auto& c : ablation.resolved()) {
    require(c.variant == "A1" || c.variant == "A2" || c.variant == "A3", "unknown ablation variant " + c.variant);
    require(c.samples >= 1, "ablation cell samples must be >= 1");
  }
}

// ---------------------------------------------------------------------------
// YAML

namespace {

YAML::Node seq(const std::vector<int>& v) {
  YAML::Node n(YAML::NodeType::Sequence);
  for (int x : v) n.push_back(x);
  n.SetStyle(YAML::EmitterStyle::Flow);
  return n;
}

void emit(YAML::Emitter& e, const char* key, const YAML::Node& value) { e << YAML::Key << key << YAML::Value << value; }
template <class T>
void emit(YAML::Emitter& e, const char* key, const T& value) {
  e << YAML::Key << key << YAML::Value << value;
}
// Shortest text that parses back to the same double.
void emit(YAML::Emitter& e, const char* key, double value) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  e << YAML::Key << key << YAML::Value << std::string(buf, res.ptr);
}

// Tracks which keys of a mapping were read so leftovers can be reported.
class Reader {
 public:
  Reader(YAML::Node node, std::string path) : node_(std::move(node)), path_(std::move(path)) {
    present_ = node_.IsDefined() && !node_.IsNull();
    if (present_ && !node_.IsMap()) throw std::invalid_argument("config: " + where() + " must be a mapping");
  }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!present_ || !node_[key]) return;
    try {
      out = node_[key].as<T>();
    } catch (const YAML::Exception&) {
      throw std::invalid_argument("config: bad value for " + join(key));
    }
  }
  void get_u64(const char* key, std::uint64_t& out) {
    used_.insert(key);
    if (!present_ || !node_[key]) return;
    try {
      out = node_[key].as<std::uint64_t>();
    } catch (const YAML::Exception&) {
      throw std::invalid_argument("config: bad value for " + join(key));
    }
  }
  template <class E, class Parse>
  void get_enum(const char* key, E& out, Parse parse) {
    std::string s;
    get(key, s);
    if (!s.empty()) out = parse(s);
  }
  Reader child(const char* key) {
    used_.insert(key);
    return Reader(present_ ? node_[key] : YAML::Node(), join(key));
  }
  YAML::Node raw(const char* key) {
    used_.insert(key);
    return present_ ? node_[key] : YAML::Node();
  }
  void finish() const {
    if (!present_) return;
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      const std::string k = it->first.as<std::string>();
      if (!used_.count(k)) throw std::invalid_argument("config: unknown key " + join(k.c_str()));
    }
  }

 private:
  std::string where() const { return path_.empty() ? "root" : path_; }
  std::string join(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  YAML::Node node_;
  bool present_ = false;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace

std::string ExperimentConfig::to_yaml() const {
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e << YAML::BeginMap;
  emit(e, "seed", seed);
  emit(e, "output_dir", output_dir);

  e << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  emit(e, "pose_fraction", data.pose_fraction);
  emit(e, "corpus_size", data.corpus_size);
  emit(e, "ind_elevation_lo", data.ind_elevation_lo);
  emit(e, "ind_elevation_hi", data.ind_elevation_hi);
  emit(e, "ood_elevation_lo", data.ood_elevation_lo);
  emit(e, "ood_elevation_hi", data.ood_elevation_hi);
  emit(e, "pretrain_samples", data.pretrain_samples);
  emit(e, "test_samples", data.test_samples);
  emit(e, "generate_samples", data.generate_samples);
  emit(e, "image_size", data.image_size);
  e << YAML::EndMap;

  const auto& r = renderer;
  e << YAML::Key << "renderer" << YAML::Value << YAML::BeginMap;
  emit(e, "height", r.render.height);
  emit(e, "width", r.render.width);
  emit(e, "samples_per_ray", r.render.samples_per_ray);
  emit(e, "near", r.render.near);
  emit(e, "far", r.render.far);
  emit(e, "background", r.render.background);
  emit(e, "channels", r.render.channels);
  emit(e, "radius", r.render.radius);
  emit(e, "focal_scale", r.render.focal_scale);
  emit(e, "hidden", seq(r.field.hidden));
  emit(e, "activation", nn::to_string(r.field.activation));
  emit(e, "cutoff_inner", r.field.cutoff_inner);
  emit(e, "cutoff_outer", r.field.cutoff_outer);
  emit(e, "poses", r.poses);
  emit(e, "views", r.views);
  e << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  emit(e, "lambda_theta", r.train.lambda_theta);
  emit(e, "lambda_t", r.train.lambda_t);
  emit(e, "pose_refinement", r.train.pose_refinement);
  emit(e, "epochs", r.train.epochs);
  emit(e, "steps_per_epoch", r.train.steps_per_epoch);
  emit(e, "rays_per_batch", r.train.rays_per_batch);
  emit(e, "learning_rate", r.train.learning_rate);
  emit(e, "final_learning_rate", r.train.final_learning_rate);
  emit(e, "pose_learning_rate", r.train.pose_learning_rate);
  emit(e, "foreground_fraction", r.train.foreground_fraction);
  emit(e, "jitter", r.train.jitter);
  emit(e, "patience", r.train.patience);
  emit(e, "psnr_floor", r.train.psnr_floor);
  emit(e, "holdout_images", r.train.holdout_images);
  e << YAML::EndMap << YAML::EndMap;

  const auto& s = estimator;
  auto emit_train = [&e](const char* key, const estimator::EstimatorTrainConfig& t) {
    e << YAML::Key << key << YAML::Value << YAML::BeginMap;
    emit(e, "epochs", t.epochs);
    emit(e, "batch_size", t.batch_size);
    emit(e, "learning_rate", t.learning_rate);
    emit(e, "d_threshold", t.loss.d_threshold);
    e << YAML::EndMap;
  };
  e << YAML::Key << "estimator" << YAML::Value << YAML::BeginMap;
  emit(e, "conv_channels", seq(s.spec.conv_channels));
  emit(e, "fc_hidden", seq(s.spec.fc_hidden));
  emit(e, "activation", nn::to_string(s.spec.activation));
  emit_train("pretrain", s.pretrain);
  emit_train("finetune", s.finetune);
  emit(e, "replay", s.replay);
  emit(e, "replay_ratio", s.replay_ratio);
  emit(e, "train_error_floor", s.train_error_floor);
  e << YAML::EndMap;

  const auto& g = gan;
  e << YAML::Key << "gan" << YAML::Value << YAML::BeginMap;
  emit(e, "mode", gan::to_string(g.train.feedback.mode));
  emit(e, "cap", g.train.feedback.cap);
  emit(e, "w1", g.train.w1);
  emit(e, "w2", g.train.w2);
  emit(e, "lr_g", g.train.lr_g);
  emit(e, "lr_d", g.train.lr_d);
  emit(e, "beta1", g.train.beta1);
  emit(e, "batch_size", g.train.batch_size);
  emit(e, "steps", g.train.steps);
  emit(e, "warmup_steps", g.train.warmup_steps);
  emit(e, "disc_steps", g.train.disc_steps);
  emit(e, "prior", to_string(g.train.prior));
  emit(e, "latent_dim", g.generator.latent_dim);
  emit(e, "generator_hidden", seq(g.generator.hidden));
  emit(e, "discriminator_hidden", seq(g.discriminator.hidden));
  emit(e, "activation", nn::to_string(g.generator.activation));
  emit(e, "k_max", g.generator.k_max);
  emit(e, "output_gain", g.generator.output_gain);
  emit(e, "camera_gain", g.generator.camera_gain);
  emit(e, "learn_camera", g.train.learn_camera);
  emit(e, "interleaved", g.train.interleaved);
  emit(e, "estimator_lr", g.train.estimator_lr);
  e << YAML::EndMap;

  e << YAML::Key << "ablation" << YAML::Value << YAML::BeginMap;
  {
    YAML::Node seeds(YAML::NodeType::Sequence);
    for (auto x : ablation.seeds) seeds.push_back(x);
    seeds.SetStyle(YAML::EmitterStyle::Flow);
    emit(e, "seeds", seeds);
  }
  emit(e, "full_grid", ablation.full_grid);
  emit(e, "sizes", seq(ablation.sizes));
  e << YAML::Key << "cells" << YAML::Value << YAML::BeginSeq;
  for (const auto& c : ablation.cells) {
    e << YAML::Flow << YAML::BeginMap;
    emit(e, "name", c.name);
    emit(e, "variant", c.variant);
    emit(e, "mode", gan::to_string(c.mode));
    emit(e, "prior", to_string(c.prior));
    emit(e, "samples", c.samples);
    e << YAML::EndMap;
  }
  e << YAML::EndSeq << YAML::EndMap;
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

ExperimentConfig ExperimentConfig::from_yaml(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& ex) {
    throw std::invalid_argument(std::string("config: parse error: ") + ex.what());
  }
  ExperimentConfig c;
  if (root.IsNull()) return c;
  Reader top(root, "");
  top.get_u64("seed", c.seed);
  top.get("output_dir", c.output_dir);

  {
    Reader d = top.child("data");
    d.get("pose_fraction", c.data.pose_fraction);
    d.get("corpus_size", c.data.corpus_size);
    d.get("ind_elevation_lo", c.data.ind_elevation_lo);
    d.get("ind_elevation_hi", c.data.ind_elevation_hi);
    d.get("ood_elevation_lo", c.data.ood_elevation_lo);
    d.get("ood_elevation_hi", c.data.ood_elevation_hi);
    d.get("pretrain_samples", c.data.pretrain_samples);
    d.get("test_samples", c.data.test_samples);
    d.get("generate_samples", c.data.generate_samples);
    d.get("image_size", c.data.image_size);
    d.finish();
  }
  {
    auto& r = c.renderer;
    Reader n = top.child("renderer");
    n.get("height", r.render.height);
    n.get("width", r.render.width);
    n.get("samples_per_ray", r.render.samples_per_ray);
    n.get("near", r.render.near);
    n.get("far", r.render.far);
    n.get("background", r.render.background);
    n.get("channels", r.render.channels);
    n.get("radius", r.render.radius);
    n.get("focal_scale", r.render.focal_scale);
    n.get("hidden", r.field.hidden);
    n.get_enum("activation", r.field.activation, nn::parse_activation);
    n.get("cutoff_inner", r.field.cutoff_inner);
    n.get("cutoff_outer", r.field.cutoff_outer);
    n.get("poses", r.poses);
    n.get("views", r.views);
    Reader t = n.child("train");
    t.get("lambda_theta", r.train.lambda_theta);
    t.get("lambda_t", r.train.lambda_t);
    t.get("pose_refinement", r.train.pose_refinement);
    t.get("epochs", r.train.epochs);
    t.get("steps_per_epoch", r.train.steps_per_epoch);
    t.get("rays_per_batch", r.train.rays_per_batch);
    t.get("learning_rate", r.train.learning_rate);
    t.get("final_learning_rate", r.train.final_learning_rate);
    t.get("pose_learning_rate", r.train.pose_learning_rate);
    t.get("foreground_fraction", r.train.foreground_fraction);
    t.get("jitter", r.train.jitter);
    t.get("patience", r.train.patience);
    t.get("psnr_floor", r.train.psnr_floor);
    t.get("holdout_images", r.train.holdout_images);
    t.finish();
    r.field.channels = r.render.channels;
    n.finish();
  }
  {
    auto& s = c.estimator;
    Reader n = top.child("estimator");
    n.get("conv_channels", s.spec.conv_channels);
    n.get("fc_hidden", s.spec.fc_hidden);
    n.get_enum("activation", s.spec.activation, nn::parse_activation);
    auto read_train = [&n](const char* key, estimator::EstimatorTrainConfig& t) {
      Reader r = n.child(key);
      r.get("epochs", t.epochs);
      r.get("batch_size", t.batch_size);
      r.get("learning_rate", t.learning_rate);
      r.get("d_threshold", t.loss.d_threshold);
      r.finish();
    };
    read_train("pretrain", s.pretrain);
    read_train("finetune", s.finetune);
    n.get("replay", s.replay);
    n.get("replay_ratio", s.replay_ratio);
    n.get("train_error_floor", s.train_error_floor);
    n.finish();
  }
  {
    auto& g = c.gan;
    Reader n = top.child("gan");
    n.get_enum("mode", g.train.feedback.mode, gan::parse_feedback_mode);
    n.get("cap", g.train.feedback.cap);
    n.get("w1", g.train.w1);
    n.get("w2", g.train.w2);
    n.get("lr_g", g.train.lr_g);
    n.get("lr_d", g.train.lr_d);
    n.get("beta1", g.train.beta1);
    n.get("batch_size", g.train.batch_size);
    n.get("steps", g.train.steps);
    n.get("warmup_steps", g.train.warmup_steps);
    n.get("disc_steps", g.train.disc_steps);
    n.get_enum("prior", g.train.prior, parse_prior_kind);
    n.get("latent_dim", g.generator.latent_dim);
    n.get("generator_hidden", g.generator.hidden);
    n.get("discriminator_hidden", g.discriminator.hidden);
    n.get_enum("activation", g.generator.activation, nn::parse_activation);
    g.discriminator.activation = g.generator.activation;
    n.get("k_max", g.generator.k_max);
    n.get("output_gain", g.generator.output_gain);
    n.get("camera_gain", g.generator.camera_gain);
    n.get("learn_camera", g.train.learn_camera);
    n.get("interleaved", g.train.interleaved);
    n.get("estimator_lr", g.train.estimator_lr);
    n.finish();
  }
  {
    auto& a = c.ablation;
    Reader n = top.child("ablation");
    YAML::Node seeds = n.raw("seeds");
    if (seeds && !seeds.IsNull()) {
      if (!seeds.IsSequence()) throw std::invalid_argument("config: ablation.seeds must be a list");
      a.seeds.clear();
      for (const auto& s : seeds) a.seeds.push_back(s.as<std::uint64_t>());
    }
    n.get("full_grid", a.full_grid);
    n.get("sizes", a.sizes);
    YAML::Node cells = n.raw("cells");
    if (cells && !cells.IsNull()) {
      if (!cells.IsSequence()) throw std::invalid_argument("config: ablation.cells must be a list");
      a.cells.clear();
      for (std::size_t i = 0; i < cells.size(); ++i) {
        Reader r(cells[i], "ablation.cells[" + std::to_string(i) + "]");
        AblationCell cell;
        r.get("name", cell.name);
        r.get("variant", cell.variant);
        r.get_enum("mode", cell.mode, gan::parse_feedback_mode);
        r.get_enum("prior", cell.prior, parse_prior_kind);
        r.get("samples", cell.samples);
        r.finish();
        if (cell.name.empty()) cell.name = cell.variant + "-" + std::to_string(i);
        a.cells.push_back(cell);
      }
    }
    n.finish();
  }
  top.finish();
  c.estimator.spec.height = c.estimator.spec.width = c.data.image_size;
  c.estimator.spec.channels = c.renderer.render.channels;
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return from_yaml(ss.str());
}

void ExperimentConfig::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << to_yaml();
}

std::uint64_t ExperimentConfig::hash() const {
  ExperimentConfig c = *this;
  c.output_dir.clear();
  c.gan.train.feedback.mode = gan::FeedbackMode::ood;
  return fnv1a64(c.to_yaml());
}

render::RenderConfig ExperimentConfig::image_render() const {
  render::RenderConfig r = renderer.render;
  r.height = r.width = data.image_size;
  return r;
}

gan::JointLimits ExperimentConfig::pose_limits() const { return gan::JointLimits::standard().restricted(data.pose_fraction); }

std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace posegen::pipeline
