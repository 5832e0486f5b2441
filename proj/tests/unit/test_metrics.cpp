#include "posegen/metrics.hpp"

#include "support.hpp"

#include <doctest.h>

#include <numbers>

using namespace posegen;
using namespace posegen::metrics;

namespace {

JointSet random_joints(Rng& rng, int n = 24) {
  JointSet x(n, 3);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) x(i, a) = uniform(rng, -0.8, 0.8);
  return x;
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Vector4d q(standard_normal(rng), standard_normal(rng), standard_normal(rng), standard_normal(rng));
  q.normalize();
  return Eigen::Quaterniond(q(0), q(1), q(2), q(3)).toRotationMatrix();
}

JointSet transform(const JointSet& x, double s, const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
  JointSet y(x.rows(), 3);
  for (Eigen::Index i = 0; i < x.rows(); ++i) y.row(i) = (s * r * x.row(i).transpose() + t).transpose();
  return y;
}

double ssd(const JointSet& a, const JointSet& b) { return (a - b).squaredNorm(); }

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("mpjpe examples") {
    Rng rng(1);
    const auto x = random_joints(rng);
    CHECK(mpjpe({x}, {x}) == 0.0);
    JointSet y = x;
    y(5, 1) += 0.24;
    CHECK(mpjpe({x}, {y}) == doctest::Approx(10.0));
    CHECK(mpjpe({x, x}, {y, x}) == doctest::Approx(5.0));
    CHECK_THROWS(mpjpe({x}, {x, x}));
    CHECK_THROWS(mpjpe({x}, {random_joints(rng, 23)}));
  }

  TEST_CASE("procrustes on identical sets is the identity") {
    Rng rng(2);
    const auto x = random_joints(rng);
    const auto s = procrustes_align(x, x);
    CHECK(s.scale == doctest::Approx(1.0));
    CHECK((s.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-9);
    CHECK(s.translation.norm() < 1e-9);
    CHECK(ssd(s.aligned, x) < 1e-18);
  }

  TEST_CASE("procrustes recovers an exact similarity") {
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
      const auto x = random_joints(rng);
      const auto r = random_rotation(rng);
      const Eigen::Vector3d t(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
      const auto s = procrustes_align(x, transform(x, 2.0, r, t));
      CHECK(std::sqrt(ssd(s.aligned, x)) < 1e-9);
      CHECK(s.scale == doctest::Approx(0.5));
      CHECK(std::abs(s.rotation.determinant() - 1.0) < 1e-9);
    }
  }

  TEST_CASE("procrustes beats a randomized similarity search") {
    Rng rng(4);
    for (int inst = 0; inst < 50; ++inst) {
      const auto x = random_joints(rng), xh = random_joints(rng);
      const auto best = procrustes_align(x, xh);
      const double opt = ssd(best.aligned, x);
      double search = std::numeric_limits<double>::infinity();
      for (int c = 0; c < 10000; ++c) {
        double s;
        Eigen::Matrix3d r;
        Eigen::Vector3d t;
        if (c % 2 == 0) {  // global draws
          s = uniform(rng, 0.1, 2.0);
          r = random_rotation(rng);
          t = Eigen::Vector3d(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
        } else {  // perturbations of the closed-form optimum
          const double e = std::pow(10.0, uniform(rng, -6, -1));
          s = best.scale * (1.0 + e * standard_normal(rng));
          r = best.rotation * rodrigues(Eigen::Vector3d(standard_normal(rng), standard_normal(rng), standard_normal(rng)) * e);
          t = best.translation + e * Eigen::Vector3d(standard_normal(rng), standard_normal(rng), standard_normal(rng));
        }
        search = std::min(search, ssd(transform(xh, s, r, t), x));
      }
      CHECK(opt <= search + 1e-9);
    }
  }

  TEST_CASE("procrustes refuses reflections and degenerate sets") {
    Rng rng(5);
    const auto x = random_joints(rng);
    JointSet mirrored = x;
    mirrored.col(0) *= -1.0;
    const auto s = procrustes_align(x, mirrored);
    CHECK(s.rotation.determinant() == doctest::Approx(1.0));
    JointSet line(24, 3);
    for (int i = 0; i < 24; ++i) line.row(i) = Eigen::RowVector3d(i, 2.0 * i, -i);
    CHECK_THROWS(procrustes_align(line, x));
    CHECK_THROWS(procrustes_align(x, line));
  }

  TEST_CASE("pa_mpjpe properties") {
    Rng rng(6);
    std::vector<JointSet> x, xh, moved;
    for (int i = 0; i < 20; ++i) {
      x.push_back(random_joints(rng));
      xh.push_back(random_joints(rng));
      moved.push_back(transform(xh.back(), uniform(rng, 0.3, 3.0), random_rotation(rng), Eigen::Vector3d::Random()));
    }
    CHECK(std::abs(pa_mpjpe(x, xh) - pa_mpjpe(x, moved)) < 1e-6);
    std::vector<JointSet> sim;
    for (const auto& a : x) sim.push_back(transform(a, 1.7, random_rotation(rng), Eigen::Vector3d(0.1, 0.2, 0.3)));
    CHECK(pa_mpjpe(x, sim) < 1e-6);
    for (int i = 0; i < 20; ++i) CHECK(ssd(procrustes_align(x[i], xh[i]).aligned, x[i]) <= ssd(xh[i], x[i]) + 1e-12);
    CHECK(pa_mpjpe(x, xh) <= mpjpe(x, xh) + 1e-9);
  }

  TEST_CASE("pck examples and monotonicity") {
    Rng rng(7);
    const auto x = random_joints(rng);
    CHECK(pck({x}, {x}) == 100.0);
    JointSet y = x;
    y(3, 0) += 0.3;  // twice the 150 mm threshold
    CHECK(pck({x}, {y}) == doctest::Approx(100.0 * 23.0 / 24.0));
    std::vector<JointSet> a, b;
    for (int i = 0; i < 10; ++i) {
      a.push_back(random_joints(rng));
      JointSet n = a.back();
      n += JointSet::Random(24, 3) * 0.15;
      b.push_back(n);
    }
    double prev = 0.0;
    for (double t : {10.0, 50.0, 100.0, 150.0, 300.0}) {
      const double p = pck(a, b, t);
      CHECK(p >= prev);
      CHECK(p >= 0.0);
      CHECK(p <= 100.0);
      prev = p;
    }
  }

  TEST_CASE("metrics scale linearly and ignore batch order") {
    Rng rng(8);
    std::vector<JointSet> x, xh, x2, xh2;
    for (int i = 0; i < 6; ++i) {
      x.push_back(random_joints(rng));
      xh.push_back(random_joints(rng));
      x2.push_back(3.0 * x.back());
      xh2.push_back(3.0 * xh.back());
    }
    CHECK(mpjpe(x2, xh2) == doctest::Approx(3.0 * mpjpe(x, xh)));
    CHECK(pa_mpjpe(x2, xh2) == doctest::Approx(3.0 * pa_mpjpe(x, xh)));
    auto xr = x, xhr = xh;
    std::reverse(xr.begin(), xr.end());
    std::reverse(xhr.begin(), xhr.end());
    CHECK(mpjpe(xr, xhr) == doctest::Approx(mpjpe(x, xh)));
    CHECK(pa_mpjpe(xr, xhr) == doctest::Approx(pa_mpjpe(x, xh)));
    CHECK(pck(xr, xhr) == doctest::Approx(pck(x, xh)));
  }

  TEST_CASE("relative improvement") {
    CHECK(relative_improvement(96.9, 89.7) == doctest::Approx(7.43).epsilon(1e-3));
    CHECK(relative_improvement(100.0, 100.0) == 0.0);
    CHECK(relative_improvement(105.2, 101.7) == doctest::Approx(3.33).epsilon(1e-3));
    CHECK_THROWS(relative_improvement(0.0, 1.0));
    CHECK_THROWS(relative_improvement(-5.0, 1.0));
  }

  TEST_CASE("report serialization") {
    MetricsReport r{12.5, 8.25, 91.0, 500, 150.0};
    const auto back = MetricsReport::from_key_value(r.to_key_value());
    CHECK(back.mpjpe == r.mpjpe);
    CHECK(back.pa_mpjpe == r.pa_mpjpe);
    CHECK(back.pck == r.pck);
    CHECK(back.n_samples == r.n_samples);
    CHECK(MetricsReport::csv_header() == "mpjpe_mm,pa_mpjpe_mm,pck,n_samples,threshold_mm");
    CHECK(r.csv_row() == "12.5000,8.2500,91.0000,500,150.0000");
    const JointSet rest = forward_kinematics(SkeletonDef::standard(), PoseVector::zero());
    const auto ev = evaluate({rest}, {rest});
    CHECK(ev.mpjpe == 0.0);
    CHECK(ev.pck == 100.0);
    CHECK(ev.n_samples == 1);
  }

  TEST_CASE("viewpoint histogram") {
    std::vector<CameraView> same(100, view_from_angles(0.5, 1.0));
    const auto h = viewpoint_histogram(same, 12);
    CHECK(*std::max_element(h.elevation.begin(), h.elevation.end()) == doctest::Approx(1.0));
    CHECK(*std::max_element(h.azimuth.begin(), h.azimuth.end()) == doctest::Approx(1.0));
    CHECK(h.window_mass == doctest::Approx(0.0));  // 28.6 degrees sits below the 30-60 window

    Rng rng(9);
    std::vector<CameraView> uni;
    for (int i = 0; i < 100000; ++i)
      uni.push_back(view_from_angles(std::asin(uniform(rng, -1, 1)), uniform(rng, -std::numbers::pi, std::numbers::pi)));
    const int bins = 10;
    const auto hu = viewpoint_histogram(uni, bins);
    CHECK(*std::max_element(hu.azimuth.begin(), hu.azimuth.end()) <= 2.0 / bins);
    double se = 0, sa = 0;
    for (int b = 0; b < bins; ++b) {
      se += hu.elevation[b];
      sa += hu.azimuth[b];
    }
    CHECK(std::abs(se - 1.0) < 1e-9);
    CHECK(std::abs(sa - 1.0) < 1e-9);
    // Sphere-uniform views put (sin 60 - sin 30) / 2 of the mass in the 30-60 degree band.
    CHECK(hu.window_mass == doctest::Approx((std::sqrt(3.0) / 2 - 0.5) / 2).epsilon(0.03));
    std::vector<CameraView> flat;  // uniform in elevation angle rather than on the sphere
    for (int i = 0; i < 100000; ++i)
      flat.push_back(view_from_angles(uniform(rng, -1.55, 1.55), uniform(rng, -std::numbers::pi, std::numbers::pi)));
    const auto hf = viewpoint_histogram(flat, bins);
    CHECK(*std::max_element(hf.elevation.begin(), hf.elevation.end()) <= 2.0 / bins);
    CHECK_THROWS(viewpoint_histogram({}, 10));
    CHECK_THROWS(viewpoint_histogram(same, 1));
  }
}
