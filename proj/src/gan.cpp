#include "posegen/gan.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace posegen::gan {

JointLimits JointLimits::parse(const std::string& text) {
  JointLimits l;
  l.lo = Eigen::VectorXd::Constant(kPoseDim, std::numeric_limits<double>::quiet_NaN());
  l.hi = l.lo;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ls(line);
    int j;
    if (!(ls >> j)) continue;
    if (j < 1 || j >= kJointCount) throw std::runtime_error("joint limits line " + std::to_string(lineno) + ": bad joint");
    for (int a = 0; a < 3; ++a) {
      double lo, hi;
      if (!(ls >> lo >> hi) || !(lo <= hi))
        throw std::runtime_error("joint limits line " + std::to_string(lineno) + ": bad bounds");
      l.lo(3 * (j - 1) + a) = lo;
      l.hi(3 * (j - 1) + a) = hi;
    }
  }
  if (l.lo.hasNaN()) throw std::runtime_error("joint limits: missing joints");
  return l;
}

JointLimits JointLimits::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

const JointLimits& JointLimits::standard() {
  static const JointLimits limits = [] {
    const char* env = std::getenv("POSEGEN_DATA_DIR");
    const std::filesystem::path dir = env ? env : POSEGEN_DATA_DIR;
    return load(dir / "joint_limits.txt");
  }();
  return limits;
}

JointLimits JointLimits::restricted(double fraction) const {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("restricted: fraction outside (0, 1]");
  JointLimits r;
  const Eigen::VectorXd mid = 0.5 * (lo + hi);
  const Eigen::VectorXd half = 0.5 * fraction * (hi - lo);
  r.lo = mid - half;
  r.hi = mid + half;
  return r;
}

bool JointLimits::contains(const PoseVector& theta, double tol) const {
  const auto& v = theta.values();
  return ((v - lo).array() >= -tol).all() && ((hi - v).array() >= -tol).all();
}

PoseVector JointLimits::sample(Rng& rng) const {
  Eigen::VectorXd v(lo.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = uniform(rng, lo(i), hi(i));
  return PoseVector(v);
}

RealPoseCorpus RealPoseCorpus::build(const JointLimits& limits, int count, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("RealPoseCorpus: count must be >= 1");
  Rng rng(seed);
  RealPoseCorpus c;
  c.poses.reserve(count);
  for (int i = 0; i < count; ++i) c.poses.push_back(limits.sample(rng));
  return c;
}

Eigen::MatrixXd RealPoseCorpus::matrix() const {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(poses.size()), kPoseDim);
  for (std::size_t i = 0; i < poses.size(); ++i) m.row(i) = poses[i].values().transpose();
  return m;
}

CameraView sample_view(Rng& rng, double elevation_lo_deg, double elevation_hi_deg) {
  if (!(elevation_lo_deg <= elevation_hi_deg)) throw std::invalid_argument("sample_view: empty window");
  constexpr double kRad = std::numbers::pi / 180.0;
  const double el = uniform(rng, elevation_lo_deg, elevation_hi_deg) * kRad;
  const double az = uniform(rng, -std::numbers::pi, std::numbers::pi);
  return view_from_angles(el, az);
}

// ---------------------------------------------------------------------------

Generator::Generator(GeneratorSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  if (spec_.latent_dim < 1) throw std::invalid_argument("Generator: latent_dim must be >= 1");
  if (!(spec_.k_max > 0.0)) throw std::invalid_argument("Generator: k_max must be positive");
  Rng rng(seed);
  nn::MlpSpec m;
  m.input = spec_.latent_dim;
  m.hidden = spec_.hidden;
  m.output = kPoseDim + 3;
  m.activation = spec_.activation;
  mlp_ = nn::Mlp(m, rng);
  Eigen::MatrixXd& last = mlp_.params.values[mlp_.params.size() - 2];
  last.leftCols(kPoseDim) *= spec_.output_gain;
  last.rightCols(3) *= spec_.camera_gain;
}

GeneratorOutput Generator::forward(ad::Tape& tape, const std::vector<ad::Var>& bound, ad::Var z) const {
  if (z.cols() != spec_.latent_dim) throw std::invalid_argument("generator: latent dimension mismatch");
  ad::Var raw = mlp_.forward(tape, bound, z);
  GeneratorOutput o;
  o.theta = ad::tanh(ad::slice_cols(raw, 0, kPoseDim)) * std::numbers::pi;
  o.k = ad::tanh(ad::slice_cols(raw, kPoseDim, 3)) * spec_.k_max;
  return o;
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> Generator::sample(const Eigen::MatrixXd& z) const {
  ad::Tape tape;
  auto bound = mlp_.params.bind(tape, false);
  auto o = forward(tape, bound, tape.constant(z));
  return {o.theta.value(), o.k.value()};
}

Discriminator::Discriminator(DiscriminatorSpec spec, std::uint64_t seed, const SkeletonDef& skel)
    : spec_(std::move(spec)) {
  Rng rng(seed);
  for (int n = 0; n < kNetworks; ++n) {
    if (n < kPartCount) {
      slices_[n] = part_indices(kAllParts[n], skel);
    } else {
      slices_[n].resize(skel.pose_dim());
      for (int i = 0; i < skel.pose_dim(); ++i) slices_[n][i] = i;
    }
    nn::MlpSpec m;
    m.input = static_cast<int>(slices_[n].size());
    m.hidden = spec_.hidden;
    m.output = 1;
    m.activation = spec_.activation;
    nets_[n] = nn::Mlp(m, rng);
    for (std::size_t i = 0; i < nets_[n].params.size(); ++i)
      params_.add("net" + std::to_string(n) + "." + nets_[n].params.names[i], nets_[n].params.values[i]);
  }
}

ad::Var Discriminator::score(ad::Tape& tape, const std::vector<ad::Var>& bound, ad::Var theta) const {
  if (theta.cols() != kPoseDim) throw std::invalid_argument("discriminator: pose width mismatch");
  ad::Var total;
  std::size_t p = 0;
  for (int n = 0; n < kNetworks; ++n) {
    const std::size_t count = nets_[n].params.size();
    std::vector<ad::Var> sub(bound.begin() + static_cast<std::ptrdiff_t>(p),
                             bound.begin() + static_cast<std::ptrdiff_t>(p + count));
    p += count;
    ad::Var x = n < kPartCount ? ad::gather_cols(theta, slices_[n]) : theta;
    ad::Var s = nets_[n].forward(tape, sub, x);
    total = n == 0 ? s : total + s;
  }
  return total * (1.0 / kNetworks);
}

Eigen::VectorXd Discriminator::evaluate(const Eigen::MatrixXd& theta) const {
  ad::Tape tape;
  auto bound = params_.bind(tape, false);
  return score(tape, bound, tape.constant(theta)).value().col(0);
}

double discriminator_accuracy(const Discriminator& d, const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake) {
  const Eigen::VectorXd r = d.evaluate(real), f = d.evaluate(fake);
  const double hits = static_cast<double>((r.array() > 0.5).count() + (f.array() < 0.5).count());
  return hits / static_cast<double>(r.size() + f.size());
}

// ---------------------------------------------------------------------------

FeedbackMode parse_feedback_mode(const std::string& name) {
  if (name == "ind") return FeedbackMode::ind;
  if (name == "ood") return FeedbackMode::ood;
  throw std::invalid_argument("unknown feedback mode: " + name);
}

std::string to_string(FeedbackMode m) { return m == FeedbackMode::ind ? "ind" : "ood"; }

void FeedbackConfig::validate() const {
  if (!(cap > 0.0)) throw std::invalid_argument("FeedbackConfig: cap must be positive");
}

double adv_loss_g(const Eigen::VectorXd& fake) {
  if (fake.size() == 0) throw std::invalid_argument("adv_loss_g: empty batch");
  return (fake.array() - 1.0).square().mean();
}

ad::Var adv_loss_g(ad::Var fake) {
  if (fake.rows() == 0) throw std::invalid_argument("adv_loss_g: empty batch");
  return ad::mean(ad::square(ad::add_scalar(fake, -1.0)));
}

double disc_loss(const Eigen::VectorXd& real, const Eigen::VectorXd& fake) {
  if (real.size() == 0 || fake.size() == 0) throw std::invalid_argument("disc_loss: empty batch");
  return (real.array() - 1.0).square().mean() + fake.array().square().mean();
}

ad::Var disc_loss(ad::Var real, ad::Var fake) {
  if (real.rows() == 0 || fake.rows() == 0) throw std::invalid_argument("disc_loss: empty batch");
  return ad::mean(ad::square(ad::add_scalar(real, -1.0))) + ad::mean(ad::square(fake));
}

double feedback_loss(const std::vector<JointSet>& x, const std::vector<JointSet>& x_hat, const FeedbackConfig& cfg) {
  cfg.validate();
  if (x.size() != x_hat.size() || x.empty()) throw std::invalid_argument("feedback_loss: batch mismatch");
  double total = 0.0;
  long count = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].rows() != x_hat[i].rows()) throw std::invalid_argument("feedback_loss: joint count mismatch");
    total += (x[i] - x_hat[i]).rowwise().norm().sum();
    count += x[i].rows();
  }
  const double e = total / static_cast<double>(count);
  return cfg.mode == FeedbackMode::ind ? e : cfg.cap - e;
}

ad::Var mean_joint_error(ad::Var x, ad::Var x_hat) {
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols() || x.cols() % 3 != 0 || x.rows() == 0)
    throw std::invalid_argument("mean_joint_error: shape mismatch");
  const Eigen::MatrixXd diff = x.value() - x_hat.value();
  const Eigen::Index joints = diff.cols() / 3;
  Eigen::MatrixXd norms(diff.rows(), joints);
  for (Eigen::Index i = 0; i < diff.rows(); ++i)
    for (Eigen::Index j = 0; j < joints; ++j) norms(i, j) = diff.row(i).segment<3>(3 * j).norm();
  const double count = static_cast<double>(norms.size());
  Eigen::MatrixXd out(1, 1);
  out(0, 0) = norms.sum() / count;
  return x.tape->record(std::move(out), {x, x_hat}, [x, x_hat, diff, norms, count](ad::Tape& t, const Eigen::MatrixXd& g) {
    Eigen::MatrixXd gx = Eigen::MatrixXd::Zero(diff.rows(), diff.cols());
    for (Eigen::Index i = 0; i < diff.rows(); ++i)
      for (Eigen::Index j = 0; j < norms.cols(); ++j)
        if (norms(i, j) > 0.0) gx.row(i).segment<3>(3 * j) = g(0, 0) / count * diff.row(i).segment<3>(3 * j) / norms(i, j);
    if (t.requires_grad(x)) t.accumulate(x, gx);
    if (t.requires_grad(x_hat)) t.accumulate(x_hat, -gx);
  });
}

ad::Var feedback_loss(ad::Var x, ad::Var x_hat, const FeedbackConfig& cfg) {
  cfg.validate();
  ad::Var e = mean_joint_error(x, x_hat);
  return cfg.mode == FeedbackMode::ind ? e : ad::add_scalar(e * -1.0, cfg.cap);
}

void GanConfig::validate() const {
  if (w1 < 0.0 || w2 < 0.0 || (w1 == 0.0 && w2 == 0.0))
    throw std::invalid_argument("GanConfig: weights must be >= 0 and not both zero");
  if (lr_g < 0.0 || lr_d < 0.0 || estimator_lr < 0.0) throw std::invalid_argument("GanConfig: negative learning rate");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("GanConfig: beta1 outside [0, 1)");
  if (batch_size < 1 || steps < 0 || warmup_steps < 0 || disc_steps < 0) throw std::invalid_argument("GanConfig: bad batch or step count");
  if (!(fixed_elevation_lo <= fixed_elevation_hi)) throw std::invalid_argument("GanConfig: empty camera window");
  feedback.validate();
  estimator_loss.validate();
}

double generator_loss(double adv, double fb, const GanConfig& cfg) { return cfg.w1 * adv + cfg.w2 * fb; }

ad::Var generator_loss(ad::Var adv, ad::Var fb, const GanConfig& cfg) { return adv * cfg.w1 + fb * cfg.w2; }

std::string history_csv(const std::vector<GanStep>& history) {
  std::ostringstream os;
  os << "step,l_g,l_d,mean_err\n" << std::setprecision(17);
  for (const auto& h : history) os << h.step << "," << h.l_g << "," << h.l_d << "," << h.mean_err << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------

namespace {

// Interleaved render rows (pixel-major) to the estimator's channel-major layout.
ad::Var to_estimator_layout(ad::Var img, const render::RenderConfig& rc) {
  if (rc.channels == 1) return img;
  std::vector<int> cols;
  const int hw = rc.pixel_count();
  for (int c = 0; c < rc.channels; ++c)
    for (int p = 0; p < hw; ++p) cols.push_back(p * rc.channels + c);
  return ad::gather_cols(img, cols);
}

struct FeedbackBranch {
  ad::Var fb;
  ad::Var err;
  ad::Var images;
};

FeedbackBranch feedback_branch(ad::Tape& tape, ad::Var theta, ad::Var k, const GanContext& ctx, const GanConfig& cfg) {
  const SkeletonDef& skel = SkeletonDef::standard();
  render::FieldBinding fb = render::bind_field(tape, *ctx.field, false);
  ad::Var img = to_estimator_layout(render::render_images(fb, theta, k, ctx.render, skel), ctx.render);
  auto est_bound = ctx.estimator->params.bind(tape, false);
  ad::Var theta_hat = ctx.estimator->forward(tape, est_bound, img);
  ad::Var x = ops::joint_positions(ops::forward_kinematics(theta, skel), skel);
  ad::Var x_hat = ops::joint_positions(ops::forward_kinematics(theta_hat, skel), skel);
  FeedbackBranch b;
  b.err = mean_joint_error(x, x_hat);
  b.fb = cfg.feedback.mode == FeedbackMode::ind ? b.err : ad::add_scalar(b.err * -1.0, cfg.feedback.cap);
  b.images = img;
  return b;
}

std::string snapshot(int step, double lg, double ld, double err) {
  std::ostringstream os;
  os << std::setprecision(17) << "train_gan: non-finite loss at step " << step << " (l_g=" << lg << ", l_d=" << ld
     << ", mean_err=" << err << ")";
  return os.str();
}

}  // namespace

double estimator_error_on(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& k, const GanContext& ctx) {
  if (!ctx.field || !ctx.estimator) throw std::invalid_argument("estimator_error_on: renderer and estimator required");
  ad::Tape tape;
  GanConfig cfg;
  return feedback_branch(tape, tape.constant(theta), tape.constant(k), ctx, cfg).err.scalar();
}

GanResult train_gan(Generator gen, Discriminator disc, const GanContext& ctx, const GanConfig& cfg,
                    std::uint64_t seed) {
  cfg.validate();
  if (!ctx.corpus || ctx.corpus->poses.empty()) throw std::invalid_argument("train_gan: empty real corpus");
  const bool use_feedback = cfg.w2 > 0.0;
  if ((use_feedback || cfg.interleaved) && (!ctx.field || !ctx.estimator))
    throw std::invalid_argument("train_gan: feedback requires renderer and estimator");
  const Eigen::MatrixXd real_all = ctx.corpus->matrix();
  Rng latent_rng(derive_seed(seed, "gan/latent"));
  Rng real_rng(derive_seed(seed, "gan/real"));
  Rng view_rng(derive_seed(seed, "gan/views"));
  ad::Adam opt_g(cfg.lr_g, cfg.beta1), opt_d(cfg.lr_d, cfg.beta1);
  ad::Adam opt_e(cfg.estimator_lr);
  const int b = cfg.batch_size;
  const int d = gen.spec().latent_dim;

  GanResult res;
  for (int step = -cfg.warmup_steps; step < cfg.steps; ++step) {
    const bool warm = step < 0;
    const bool feedback_now = use_feedback && !warm;
    const bool tune_estimator = cfg.interleaved && !warm;
    GanStep h;
    h.step = step;
    h.mean_err = std::numeric_limits<double>::quiet_NaN();

    for (int s = 0; s < cfg.disc_steps; ++s) {
      const Eigen::MatrixXd z = sample_latent(cfg.prior, d, b, latent_rng);
      const Eigen::MatrixXd fake = gen.sample(z).first;
      Eigen::MatrixXd real(b, kPoseDim);
      for (int i = 0; i < b; ++i) real.row(i) = real_all.row(static_cast<Eigen::Index>(uniform_index(real_rng, real_all.rows())));
      ad::Tape tape;
      auto bound = disc.params().bind(tape, true);
      ad::Var loss = disc_loss(disc.score(tape, bound, tape.constant(real)), disc.score(tape, bound, tape.constant(fake)));
      h.l_d = loss.scalar();
      if (!std::isfinite(h.l_d)) throw std::runtime_error(snapshot(step, h.l_g, h.l_d, h.mean_err));
      tape.backward(loss);
      opt_d.step(disc.params(), ad::gradients(tape, bound));
    }

    const Eigen::MatrixXd z = sample_latent(cfg.prior, d, b, latent_rng);
    Eigen::MatrixXd fixed_k;
    if (!cfg.learn_camera) {
      fixed_k.resize(b, 3);
      for (int i = 0; i < b; ++i)
        fixed_k.row(i) = sample_view(view_rng, cfg.fixed_elevation_lo, cfg.fixed_elevation_hi).values().transpose();
    }
    ad::Tape tape;
    auto gb = gen.params().bind(tape, true);
    auto db = disc.params().bind(tape, false);
    GeneratorOutput out = gen.forward(tape, gb, tape.constant(z));
    ad::Var k = cfg.learn_camera ? out.k : tape.constant(fixed_k);
    ad::Var adv = adv_loss_g(disc.score(tape, db, out.theta));
    ad::Var loss = adv * cfg.w1;
    Eigen::MatrixXd images;
    if (feedback_now || tune_estimator) {
      FeedbackBranch fbr = feedback_branch(tape, out.theta, k, ctx, cfg);
      h.mean_err = fbr.err.scalar();
      images = fbr.images.value();
      if (feedback_now) loss = generator_loss(adv, fbr.fb, cfg);
    }
    h.l_g = loss.scalar();
    if (!std::isfinite(h.l_g)) throw std::runtime_error(snapshot(step, h.l_g, h.l_d, h.mean_err));
    const Eigen::MatrixXd theta_batch = out.theta.value();
    tape.backward(loss);
    opt_g.step(gen.params(), ad::gradients(tape, gb));

    if (tune_estimator) {
      ad::Tape et;
      auto eb = ctx.estimator->params.bind(et, true);
      ad::Var pred = ctx.estimator->forward(et, eb, et.constant(images));
      ad::Var el = estimator::clipped_loss(et.constant(theta_batch), pred, cfg.estimator_loss);
      et.backward(el);
      opt_e.step(ctx.estimator->params, ad::gradients(et, eb));
    }
    if (!warm) res.history.push_back(h);
  }
  res.generator = std::move(gen);
  res.discriminator = std::move(disc);
  return res;
}

}  // namespace posegen::gan
