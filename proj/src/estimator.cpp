#include "posegen/estimator.hpp"

#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace posegen::estimator {

void EstimatorSpec::validate() const {
  if (height < 8 || width < 8 || channels < 1) throw std::invalid_argument("EstimatorSpec: bad image shape");
  if (conv_channels.empty()) throw std::invalid_argument("EstimatorSpec: need at least one convolution");
  const int stride = 1 << conv_channels.size();
  if (height % stride != 0 || width % stride != 0)
    throw std::invalid_argument("EstimatorSpec: image size must be divisible by 2^blocks");
}

Estimator::Estimator(EstimatorSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(seed);
  int c = spec_.channels, h = spec_.height, w = spec_.width;
  for (std::size_t i = 0; i < spec_.conv_channels.size(); ++i) {
    nn::ConvShape s;
    s.in_channels = c;
    s.out_channels = spec_.conv_channels[i];
    s.in_h = h;
    s.in_w = w;
    convs_.push_back(s);
    const int fan_in = c * s.kernel * s.kernel;
    params.add("conv" + std::to_string(i) + ".w", normal_matrix(rng, fan_in, s.out_channels, std::sqrt(2.0 / fan_in)));
    params.add("conv" + std::to_string(i) + ".b", Eigen::MatrixXd::Zero(1, s.out_channels));
    c = s.out_channels;
    h = s.out_h();
    w = s.out_w();
  }
  nn::MlpSpec m;
  m.input = c * h * w;
  m.hidden = spec_.fc_hidden;
  m.output = kPoseDim;
  m.activation = spec_.activation;
  head_ = nn::Mlp(m, rng, 0.1);
  for (std::size_t i = 0; i < head_.params.size(); ++i) params.add("fc." + head_.params.names[i], head_.params.values[i]);
}

void Estimator::set_output_center(const Eigen::VectorXd& theta) {
  if (theta.size() != kPoseDim) throw std::invalid_argument("set_output_center: pose size");
  Eigen::MatrixXd& b = params.values.back();
  for (int i = 0; i < kPoseDim; ++i) b(0, i) = std::atanh(std::clamp(theta(i) / std::numbers::pi, -0.999, 0.999));
}

ad::Var Estimator::forward(ad::Tape& tape, const std::vector<ad::Var>& bound, ad::Var images) const {
  if (images.cols() != spec_.input_size()) throw std::invalid_argument("estimate: image resolution mismatch");
  ad::Var h = images;
  std::size_t p = 0;
  for (const auto& s : convs_) {
    h = nn::activate(nn::conv2d(h, bound[p], bound[p + 1], s), spec_.activation);
    p += 2;
  }
  std::vector<ad::Var> head(bound.begin() + static_cast<std::ptrdiff_t>(p), bound.end());
  return ad::tanh(head_.forward(tape, head, h)) * std::numbers::pi;
}

Eigen::RowVectorXd image_row(const render::Image& image) {
  const int hw = image.height * image.width;
  Eigen::RowVectorXd row(hw * image.channels);
  for (int c = 0; c < image.channels; ++c)
    for (int p = 0; p < hw; ++p) row(c * hw + p) = image.pixels(p * image.channels + c);
  return row;
}

Eigen::MatrixXd Estimator::estimate_batch(const Eigen::MatrixXd& images) const {
  ad::Tape tape;
  auto bound = params.bind(tape, false);
  return forward(tape, bound, tape.constant(images)).value();
}

PoseVector Estimator::estimate(const render::Image& image) const {
  if (image.height != spec_.height || image.width != spec_.width || image.channels != spec_.channels)
    throw std::invalid_argument("estimate: image resolution mismatch");
  return PoseVector(Eigen::VectorXd(estimate_batch(image_row(image)).row(0).transpose()));
}

void EstimatorLossConfig::validate() const {
  if (!(d_threshold > 0.0)) throw std::invalid_argument("EstimatorLossConfig: d_threshold must be positive");
}

double clipped_loss(const PoseVector& theta, const PoseVector& theta_hat, const EstimatorLossConfig& cfg) {
  if (theta.size() != theta_hat.size()) throw std::invalid_argument("clipped_loss: dimension mismatch");
  const double w = (theta.values() - theta_hat.values()).norm();
  return w < cfg.d_threshold ? w : 0.0;
}

ad::Var clipped_loss(ad::Var theta, ad::Var theta_hat, const EstimatorLossConfig& cfg) {
  if (theta.rows() != theta_hat.rows() || theta.cols() != theta_hat.cols())
    throw std::invalid_argument("clipped_loss: shape mismatch");
  if (theta.rows() == 0) throw std::invalid_argument("clipped_loss: empty batch");
  const Eigen::MatrixXd diff = theta_hat.value() - theta.value();
  const Eigen::VectorXd w = diff.rowwise().norm();
  const double n = static_cast<double>(w.size());
  Eigen::VectorXd kept = (w.array() < cfg.d_threshold).select(w, 0.0);
  Eigen::MatrixXd out(1, 1);
  out(0, 0) = kept.sum() / n;
  return theta.tape->record(std::move(out), {theta, theta_hat},
                            [theta, theta_hat, diff, kept, n](ad::Tape& t, const Eigen::MatrixXd& g) {
                              Eigen::MatrixXd gh = Eigen::MatrixXd::Zero(diff.rows(), diff.cols());
                              for (Eigen::Index i = 0; i < diff.rows(); ++i)
                                if (kept(i) > 0.0) gh.row(i) = g(0, 0) / n * diff.row(i) / kept(i);
                              if (t.requires_grad(theta_hat)) t.accumulate(theta_hat, gh);
                              if (t.requires_grad(theta)) t.accumulate(theta, -gh);
                            });
}

void EstimatorTrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("EstimatorTrainConfig: epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("EstimatorTrainConfig: batch_size must be >= 1");
  if (learning_rate < 0.0) throw std::invalid_argument("EstimatorTrainConfig: learning_rate must be >= 0");
  loss.validate();
}

std::string history_csv(const std::vector<EpochStats>& history) {
  std::ostringstream os;
  os << "epoch,mean_err,excluded_frac\n" << std::setprecision(17);
  for (const auto& e : history) os << e.epoch << "," << e.mean_err << "," << e.excluded_frac << "\n";
  return os.str();
}

std::vector<EpochStats> train_estimator(Estimator& est, const std::vector<RenderedSample>& data,
                                        const EstimatorTrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_estimator: empty dataset");
  const int n = static_cast<int>(data.size());
  Eigen::MatrixXd images(n, est.spec().input_size());
  Eigen::MatrixXd poses(n, kPoseDim);
  for (int i = 0; i < n; ++i) {
    const auto& img = data[i].image;
    if (img.height != est.spec().height || img.width != est.spec().width || img.channels != est.spec().channels)
      throw std::invalid_argument("train_estimator: image resolution mismatch");
    images.row(i) = image_row(img);
    poses.row(i) = data[i].theta.values().transpose();
  }
  Rng rng(seed);
  ad::Adam opt(cfg.learning_rate);
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::vector<EpochStats> history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);
    EpochStats st;
    st.epoch = epoch;
    long excluded = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int b = std::min(cfg.batch_size, n - start);
      Eigen::MatrixXd xb(b, images.cols()), yb(b, kPoseDim);
      for (int i = 0; i < b; ++i) {
        xb.row(i) = images.row(order[start + i]);
        yb.row(i) = poses.row(order[start + i]);
      }
      ad::Tape tape;
      auto bound = est.params.bind(tape, true);
      ad::Var pred = est.forward(tape, bound, tape.constant(xb));
      ad::Var loss = clipped_loss(tape.constant(yb), pred, cfg.loss);
      if (!std::isfinite(loss.scalar()))
        throw std::runtime_error("train_estimator: non-finite loss in epoch " + std::to_string(epoch));
      const Eigen::VectorXd w = (pred.value() - yb).rowwise().norm();
      st.mean_err += w.sum();
      excluded += (w.array() >= cfg.loss.d_threshold).count();
      st.mean_loss += loss.scalar() * b;
      tape.backward(loss);
      opt.step(est.params, ad::gradients(tape, bound));
    }
    st.mean_err /= n;
    st.mean_loss /= n;
    st.excluded_frac = static_cast<double>(excluded) / n;
    history.push_back(st);
  }
  return history;
}

std::vector<PoseVector> predict(const Estimator& est, const std::vector<RenderedSample>& data) {
  std::vector<PoseVector> out;
  out.reserve(data.size());
  constexpr std::size_t kChunk = 256;
  for (std::size_t s = 0; s < data.size(); s += kChunk) {
    const std::size_t e = std::min(data.size(), s + kChunk);
    Eigen::MatrixXd x(static_cast<Eigen::Index>(e - s), est.spec().input_size());
    for (std::size_t i = s; i < e; ++i) x.row(static_cast<Eigen::Index>(i - s)) = image_row(data[i].image);
    const Eigen::MatrixXd y = est.estimate_batch(x);
    for (Eigen::Index i = 0; i < y.rows(); ++i) out.emplace_back(Eigen::VectorXd(y.row(i).transpose()));
  }
  return out;
}

}  // namespace posegen::estimator
