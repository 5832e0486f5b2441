#include "posegen/estimator.hpp"

#include "support.hpp"

#include <doctest.h>

#include <limits>

using namespace posegen;
using namespace posegen::estimator;
using test::rel_err;

namespace {

EstimatorSpec small_spec() {
  EstimatorSpec s;
  s.height = s.width = 16;
  s.conv_channels = {4, 8};
  s.fc_hidden = {16};
  return s;
}

std::vector<RenderedSample> oracle_set(int n, int size, double scale, std::uint64_t seed) {
  render::RenderConfig rc;
  rc.height = rc.width = size;
  Rng rng(seed);
  std::vector<RenderedSample> out;
  for (int i = 0; i < n; ++i) {
    RenderedSample s;
    s.theta = test::random_pose(rng, scale);
    s.k = view_from_angles(0.0, uniform(rng, -0.25, 0.25));
    s.image = render::oracle_render(s.theta, s.k, rc);
    s.split = "train";
    out.push_back(std::move(s));
  }
  return out;
}

double mean_error(const Estimator& est, const std::vector<RenderedSample>& data) {
  const auto pred = predict(est, data);
  double e = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) e += (pred[i].values() - data[i].theta.values()).norm();
  return e / data.size();
}

}  // namespace

TEST_SUITE("estimator") {
  TEST_CASE("clipped loss examples") {
    EstimatorLossConfig cfg;
    cfg.d_threshold = 2.0;
    Eigen::VectorXd a = Eigen::VectorXd::Zero(kPoseDim), b = a;
    b(0) = 0.6;
    b(1) = 0.8;
    CHECK(clipped_loss(PoseVector(a), PoseVector(b), cfg) == doctest::Approx(1.0));
    b(0) = 2.0;
    b(1) = 0.0;
    CHECK(clipped_loss(PoseVector(a), PoseVector(b), cfg) == 0.0);  // exactly at the threshold
    b(0) = 3.0;
    CHECK(clipped_loss(PoseVector(a), PoseVector(b), cfg) == 0.0);
    CHECK(clipped_loss(PoseVector(a), PoseVector(a), cfg) == 0.0);
  }

  TEST_CASE("clipped loss stays in [0, d) on random pairs") {
    Rng rng(1);
    EstimatorLossConfig cfg;
    for (int i = 0; i < 1000; ++i) {
      cfg.d_threshold = uniform(rng, 0.1, 5.0);
      const double l = clipped_loss(test::random_pose(rng, 0.5), test::random_pose(rng, 0.5), cfg);
      CHECK(l >= 0.0);
      CHECK(l < cfg.d_threshold);
    }
  }

  TEST_CASE("batched clipped loss excludes far samples from the gradient") {
    EstimatorLossConfig cfg;
    cfg.d_threshold = 1.0;
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(3, kPoseDim), p = y;
    p(0, 0) = 0.5;   // kept
    p(1, 2) = 3.0;   // excluded
    p(2, 5) = -0.2;  // kept
    ad::Tape tape;
    auto pv = tape.leaf(p);
    auto l = clipped_loss(tape.constant(y), pv, cfg);
    CHECK(l.scalar() == doctest::Approx((0.5 + 0.2) / 3.0));
    tape.backward(l);
    CHECK(pv.grad().row(1).isZero());
    CHECK(pv.grad()(0, 0) == doctest::Approx(1.0 / 3.0));
    CHECK(pv.grad()(2, 5) == doctest::Approx(-1.0 / 3.0));
    CHECK_THROWS(clipped_loss(tape.constant(y), tape.constant(Eigen::MatrixXd::Zero(2, kPoseDim)), cfg));
    cfg.d_threshold = 0.0;
    CHECK_THROWS(cfg.validate());
  }

  TEST_CASE("an unbounded threshold reduces to the plain L2 objective") {
    EstimatorLossConfig cfg;
    cfg.d_threshold = std::numeric_limits<double>::infinity();
    Rng rng(2);
    const Eigen::MatrixXd y = normal_matrix(rng, 5, kPoseDim, 2.0);
    const Eigen::MatrixXd p = normal_matrix(rng, 5, kPoseDim, 2.0);
    ad::Tape t1;
    auto p1 = t1.leaf(p);
    auto l1 = clipped_loss(t1.constant(y), p1, cfg);
    t1.backward(l1);
    ad::Tape t2;
    auto p2 = t2.leaf(p);
    auto l2 = ad::mean(ad::sqrt(ad::row_sum(ad::square(ad::sub(p2, t2.constant(y))))));
    t2.backward(l2);
    CHECK(l1.scalar() == doctest::Approx(l2.scalar()).epsilon(1e-12));
    CHECK((p1.grad() - p2.grad()).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("outputs stay inside the squashing range") {
    Estimator est(small_spec(), 3);
    Rng rng(3);
    const Eigen::MatrixXd x = normal_matrix(rng, 4, est.spec().input_size(), 50.0);
    const auto y = est.estimate_batch(x);
    CHECK(y.rows() == 4);
    CHECK(y.cols() == kPoseDim);
    CHECK(y.cwiseAbs().maxCoeff() < std::numbers::pi);
  }

  TEST_CASE("construction and inference are deterministic") {
    Estimator a(small_spec(), 4), b(small_spec(), 4), c(small_spec(), 5);
    const auto data = oracle_set(3, 16, 0.3, 4);
    CHECK(a.estimate(data[0].image).values() == b.estimate(data[0].image).values());
    CHECK(a.estimate(data[0].image).values() != c.estimate(data[0].image).values());
  }

  TEST_CASE("output centering sets the prediction on a blank image") {
    Estimator est(small_spec(), 6);
    Eigen::VectorXd center = Eigen::VectorXd::Constant(kPoseDim, 0.2);
    est.set_output_center(center);
    // A zero image still passes through the conv biases, so only check closeness.
    const auto y = est.estimate(render::Image(16, 16, 1, 0.0));
    CHECK((y.values() - center).cwiseAbs().maxCoeff() < 0.5);
  }

  TEST_CASE("estimator gradients match central differences") {
    Estimator est(small_spec(), 7);
    const auto data = oracle_set(2, 16, 0.3, 7);
    Eigen::MatrixXd x(2, est.spec().input_size()), y(2, kPoseDim);
    for (int i = 0; i < 2; ++i) {
      x.row(i) = image_row(data[i].image);
      y.row(i) = data[i].theta.values().transpose();
    }
    EstimatorLossConfig cfg;
    cfg.d_threshold = 1e9;
    const auto loss_at = [&](const Estimator& e) {
      ad::Tape t;
      auto b = e.params.bind(t, false);
      return clipped_loss(t.constant(y), e.forward(t, b, t.constant(x)), cfg).scalar();
    };
    ad::Tape tape;
    auto bound = est.params.bind(tape, true);
    auto l = clipped_loss(tape.constant(y), est.forward(tape, bound, tape.constant(x)), cfg);
    tape.backward(l);
    const auto g = ad::gradients(tape, bound);
    int checked = 0;
    for (std::size_t p = 0; p < est.params.size(); ++p) {
      const auto& m = est.params.values[p];
      for (int t = 0; t < 4; ++t) {
        const Eigen::Index r = (t * 5) % m.rows(), c = (t * 3) % m.cols();
        const double fd = test::central_difference(
            [&](const Eigen::MatrixXd& v) {
              Estimator e2 = est;
              e2.params.values[p] = v;
              return loss_at(e2);
            },
            m, r, c, 1e-6);
        if (std::max(std::abs(fd), std::abs(g[p](r, c))) < 1e-9) continue;
        ++checked;
        CHECK(rel_err(g[p](r, c), fd) < 1e-3);
      }
    }
    CHECK(checked > 10);
  }

  TEST_CASE("training on a fixed oracle set halves the training error") {
    EstimatorSpec spec;
    Estimator est(spec, 8);
    const auto data = oracle_set(500, 32, 0.5, 8);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(kPoseDim);
    for (const auto& s : data) mean += s.theta.values();
    est.set_output_center(mean / data.size());
    const double before = mean_error(est, data);
    EstimatorTrainConfig cfg;
    cfg.epochs = 30;
    cfg.loss.d_threshold = 1e9;
    const auto hist = train_estimator(est, data, cfg, 8);
    const double after = mean_error(est, data);
    MESSAGE("train error ", before, " -> ", after);
    CHECK(hist.size() == 30);
    CHECK(after <= 0.5 * before);
  }

  TEST_CASE("a single repeated sample is fit monotonically") {
    Estimator est(small_spec(), 9);
    const auto data = oracle_set(1, 16, 0.3, 9);
    EstimatorTrainConfig cfg;
    cfg.learning_rate = 1e-4;
    cfg.epochs = 1;
    double prev = mean_error(est, data);
    for (int i = 0; i < 25; ++i) {
      train_estimator(est, data, cfg, 9);
      const double cur = mean_error(est, data);
      CHECK(cur <= prev + 1e-12);
      prev = cur;
    }
  }

  TEST_CASE("a zero learning rate leaves the estimator unchanged") {
    Estimator est(small_spec(), 10);
    const auto data = oracle_set(20, 16, 0.3, 10);
    const auto before = est.params.values;
    EstimatorTrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.epochs = 3;
    cfg.batch_size = 7;
    const auto hist = train_estimator(est, data, cfg, 10);
    CHECK(est.params.values == before);
    CHECK(hist[0].mean_err == doctest::Approx(hist[2].mean_err).epsilon(1e-12));
    CHECK(hist[0].mean_err == doctest::Approx(mean_error(est, data)).epsilon(1e-12));
  }

  TEST_CASE("excluded fraction counts samples beyond the threshold") {
    Estimator est(small_spec(), 11);
    const auto data = oracle_set(10, 16, 0.3, 11);
    EstimatorTrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.epochs = 1;
    cfg.loss.d_threshold = 1e-6;
    CHECK(train_estimator(est, data, cfg, 1)[0].excluded_frac == 1.0);
    cfg.loss.d_threshold = 1e9;
    CHECK(train_estimator(est, data, cfg, 1)[0].excluded_frac == 0.0);
  }

  TEST_CASE("training input errors") {
    Estimator est(small_spec(), 12);
    EstimatorTrainConfig cfg;
    CHECK_THROWS(train_estimator(est, {}, cfg, 1));
    CHECK_THROWS(train_estimator(est, oracle_set(2, 20, 0.3, 1), cfg, 1));
    cfg.batch_size = 0;
    CHECK_THROWS(train_estimator(est, oracle_set(2, 16, 0.3, 1), cfg, 1));
    EstimatorSpec bad = small_spec();
    bad.height = 0;
    CHECK_THROWS(Estimator(bad, 1));
  }

  TEST_CASE("history csv layout") {
    std::vector<EpochStats> h(2);
    h[1].epoch = 1;
    h[1].mean_err = 0.5;
    h[1].excluded_frac = 0.25;
    CHECK(history_csv(h) == "epoch,mean_err,excluded_frac\n0,0,0\n1,0.5,0.25\n");
  }
}
