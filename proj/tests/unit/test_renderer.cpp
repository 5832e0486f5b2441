#include "posegen/renderer.hpp"

#include "support.hpp"

#include <doctest.h>

#include <numbers>

using namespace posegen;
using namespace posegen::render;
using test::rel_err;
constexpr double pi = std::numbers::pi;

namespace {

const SkeletonDef& skel() { return SkeletonDef::standard(); }

Image flip_horizontal(const Image& a) {
  Image b(a.height, a.width, a.channels);
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x)
      for (int c = 0; c < a.channels; ++c) b.at(y, a.width - 1 - x, c) = a.at(y, x, c);
  return b;
}

/// Rest pose with the feet and head turned into the z = 0 plane so the body is
/// mirror symmetric front to back as well as left to right.
PoseVector planar_pose() {
  Eigen::VectorXd t = Eigen::VectorXd::Zero(kPoseDim);
  const double ankle = std::atan2(0.12, 0.05);
  t(3 * (7 - 1)) = ankle;
  t(3 * (8 - 1)) = ankle;
  t(3 * (12 - 1)) = std::atan2(-0.03, 0.09);
  return PoseVector(t);
}

RadianceField dense_field(std::uint64_t seed, std::vector<int> hidden = {32, 32}) {
  FieldSpec fs;
  fs.hidden = std::move(hidden);
  RadianceField f(fs, skel(), seed);
  f.params().values.back()(0, 0) = 2.0;  // density bias: visible at init
  return f;
}

}  // namespace

TEST_SUITE("renderer") {
  TEST_CASE("composite of empty space") {
    const auto r = composite(Eigen::VectorXd::Zero(4), Eigen::VectorXd::Constant(4, 0.1), Eigen::MatrixXd::Constant(4, 1, 0.7));
    CHECK(r.color(0) == 0.0);
    CHECK(r.transmittance.isOnes());
    CHECK(r.final_transmittance == 1.0);
  }

  TEST_CASE("composite with an opaque first sample") {
    Eigen::MatrixXd c(3, 1);
    c << 0.3, 0.9, 0.1;
    const auto r = composite(Eigen::Vector3d(1e7, 1.0, 1.0), Eigen::VectorXd::Constant(3, 0.1), c);
    CHECK(std::abs(r.color(0) - 0.3) < 1e-6);
  }

  TEST_CASE("composite hand example with two half-opaque samples") {
    Eigen::MatrixXd c(2, 3);
    c << 1, 0, 0, 0, 1, 0;
    const auto r = composite(Eigen::Vector2d(std::log(2.0), std::log(2.0)), Eigen::Vector2d(1.0, 1.0), c);
    CHECK(r.color(0) == doctest::Approx(0.5));
    CHECK(r.color(1) == doctest::Approx(0.25));
    CHECK(r.color(2) == doctest::Approx(0.0));
  }

  TEST_CASE("composite invariants on random inputs") {
    Rng rng(1);
    for (int trial = 0; trial < 500; ++trial) {
      const int q = 2 + static_cast<int>(uniform_index(rng, 40));
      Eigen::VectorXd s(q), d(q);
      Eigen::MatrixXd c(q, 2);
      for (int i = 0; i < q; ++i) {
        s(i) = uniform01(rng) < 0.3 ? 0.0 : std::exp(uniform(rng, -4, 4));
        d(i) = uniform(rng, 0.01, 0.5);
        c(i, 0) = uniform01(rng);
        c(i, 1) = uniform01(rng);
      }
      const auto r = composite(s, d, c);
      for (int i = 1; i < q; ++i) CHECK(r.transmittance(i) <= r.transmittance(i - 1));
      CHECK(r.weights.minCoeff() >= 0.0);
      CHECK(r.weights.maxCoeff() <= 1.0);
      CHECK(r.weights.sum() <= 1.0 + 1e-12);
      CHECK(r.weights.sum() + r.final_transmittance == doctest::Approx(1.0));
      for (int ch = 0; ch < 2; ++ch) CHECK(r.color(ch) <= c.col(ch).maxCoeff() + 1e-12);
    }
  }

  TEST_CASE("composite rejects bad inputs") {
    const Eigen::MatrixXd c = Eigen::MatrixXd::Zero(2, 1);
    CHECK_THROWS(composite(Eigen::Vector2d(-1.0, 0.0), Eigen::Vector2d(1.0, 1.0), c));
    CHECK_THROWS(composite(Eigen::Vector2d(1.0, 0.0), Eigen::Vector2d(0.0, 1.0), c));
    CHECK_THROWS(composite(Eigen::VectorXd(0), Eigen::VectorXd(0), Eigen::MatrixXd(0, 1)));
  }

  TEST_CASE("bone encoding: distance vanishes at the joint and encoding is pure") {
    Rng rng(2);
    const auto pose = test::random_pose(rng, 1.0);
    const auto x = forward_kinematics(skel(), pose);
    for (int j = 1; j < 24; ++j) {
      const auto e = bone_relative_encode(x.row(j).transpose(), pose);
      REQUIRE(e.size() == 4 * 23);
      CHECK(std::abs(e(4 * (j - 1) + 3)) < 1e-12);
    }
    const Eigen::Vector3d p(0.1, 0.2, -0.3);
    CHECK(bone_relative_encode(p, pose) == bone_relative_encode(p, pose));
  }

  TEST_CASE("bone encoding is invariant to a rigid motion of body and point") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      const auto pose = test::random_pose(rng, 1.0);
      const Eigen::Matrix3d r = rodrigues(Eigen::Vector3d(uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -2, 2)));
      const Eigen::Vector3d t(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
      const Eigen::Vector3d p(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
      const Kinematics base = pose_kinematics(skel(), pose.values());
      Kinematics moved = pose_kinematics(skel(), pose.values(), r);
      for (Eigen::Index j = 0; j < moved.positions.rows(); ++j) moved.positions.row(j) += t.transpose();
      const auto a = bone_relative_encode(p, base, skel());
      const auto b = bone_relative_encode(r * p + t, moved, skel());
      CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9);
    }
  }

  TEST_CASE("empty field renders the background") {
    RenderConfig rc;
    rc.height = rc.width = 16;
    rc.samples_per_ray = 8;
    rc.background = 0.3;
    RadianceField f(FieldSpec{}, skel(), 4);
    f.make_empty();
    const auto img = posegen::render::render(PoseVector::zero(), CameraView(), f, rc);
    CHECK((img.pixels.array() == 0.3).all());
  }

  TEST_CASE("render gradients match central differences") {
    RenderConfig rc;
    rc.height = rc.width = 16;
    rc.samples_per_ray = 8;
    auto field = dense_field(7);
    Rng rng(3);
    const Eigen::MatrixXd th = normal_matrix(rng, 1, kPoseDim, 0.3);
    Eigen::MatrixXd k(1, 3);
    k << 0.3, 0.8, 0.1;
    const auto mean_pixel = [&](const Eigen::MatrixXd& t, const Eigen::MatrixXd& kv, const RadianceField& f) {
      ad::Tape tape;
      auto fb = bind_field(tape, f, false);
      return render_images(fb, tape.constant(t), tape.constant(kv), rc).value().mean();
    };
    ad::Tape tape;
    auto fb = bind_field(tape, field, true);
    auto tv = tape.leaf(th), kv = tape.leaf(k);
    auto out = ad::mean(render_images(fb, tv, kv, rc));
    REQUIRE(out.scalar() > 0.01);
    tape.backward(out);
    const double h = 1e-6;
    int checked = 0;
    for (int i = 0; i < kPoseDim; ++i) {
      const double fd = test::central_difference([&](const Eigen::MatrixXd& t) { return mean_pixel(t, k, field); }, th, 0, i, h);
      const double an = tv.grad()(0, i);
      if (std::max(std::abs(fd), std::abs(an)) < 1e-7) continue;
      ++checked;
      CHECK(rel_err(an, fd) < 1e-2);
    }
    CHECK(checked > 20);
    for (int i = 0; i < 3; ++i) {
      const double fd = test::central_difference([&](const Eigen::MatrixXd& v) { return mean_pixel(th, v, field); }, k, 0, i, h);
      CHECK(rel_err(kv.grad()(0, i), fd) < 1e-2);
    }
    const auto g = ad::gradients(tape, fb.params);
    for (std::size_t p = 0; p < field.params().size(); ++p)
      for (int t = 0; t < 3; ++t) {
        const auto& m = field.params().values[p];
        const Eigen::Index r = (t * 7) % m.rows(), c = (t * 3) % m.cols();
        const auto fd = test::central_difference(
            [&](const Eigen::MatrixXd& v) {
              RadianceField f2 = field;
              f2.params().values[p] = v;
              return mean_pixel(th, k, f2);
            },
            m, r, c, h);
        if (std::max(std::abs(fd), std::abs(g[p](r, c))) < 1e-9) continue;
        CHECK(rel_err(g[p](r, c), fd) < 1e-2);
      }
  }

  TEST_CASE("render is deterministic and in range") {
    RenderConfig rc;
    rc.height = rc.width = 16;
    rc.samples_per_ray = 8;
    const auto field = dense_field(8);
    Rng rng(4);
    const auto pose = test::random_pose(rng);
    const CameraView k(Eigen::Vector3d(0.2, 0.4, 0.0));
    const auto a = posegen::render::render(pose, k, field, rc);
    const auto b = posegen::render::render(pose, k, field, rc);
    CHECK(a.pixels == b.pixels);
    CHECK(a.pixels.minCoeff() >= 0.0);
    CHECK(a.pixels.maxCoeff() <= 1.0);
    const auto o = oracle_render(pose, k, rc);
    CHECK(o.pixels == oracle_render(pose, k, rc).pixels);
    CHECK(o.pixels.minCoeff() >= 0.0);
    CHECK(o.pixels.maxCoeff() <= 1.0);
  }

  TEST_CASE("field culls samples far from every bone") {
    RenderConfig rc;
    rc.height = rc.width = 16;
    rc.samples_per_ray = 8;
    const auto field = dense_field(9);
    // A ray aimed well above the head crosses no bone influence region.
    const auto ext = camera_extrinsics(CameraView(), rc.radius);
    ad::Tape tape;
    auto fb = bind_field(tape, field, false);
    RaySet rays;
    rays.pose_index = {0};
    rays.directions = {Eigen::Vector3d(0.0, -0.5, 1.0).normalized()};  // camera y points down
    auto fk = ops::forward_kinematics(tape.constant(Eigen::MatrixXd::Zero(1, kPoseDim)), skel());
    auto cam = ops::camera(tape.constant(Eigen::MatrixXd::Zero(1, 3)), rc.radius);
    const auto c = render_rays(fb, fk, cam, rays, rc);
    CHECK(c.value()(0, 0) == rc.background);
    (void)ext;
  }

  TEST_CASE("oracle: frontal rest pose is left-right symmetric") {
    RenderConfig rc;
    const auto img = oracle_render(PoseVector::zero(), CameraView(), rc);
    CHECK((img.pixels - flip_horizontal(img).pixels).cwiseAbs().maxCoeff() == 0.0);
    CHECK((img.pixels.array() > 0).count() > 100);
  }

  TEST_CASE("oracle: a half turn about the vertical mirrors the frontal view") {
    RenderConfig rc;
    OracleStyle flat;
    flat.front_shading = 0.0;
    const auto pose = planar_pose();
    const auto front = oracle_render(pose, CameraView(), rc, flat);
    const auto back = oracle_render(pose, CameraView(Eigen::Vector3d(0, pi, 0)), rc, flat);
    CHECK((back.pixels - flip_horizontal(front).pixels).cwiseAbs().maxCoeff() < 1e-9);
    // With default shading the silhouette still mirrors.
    const auto fs = oracle_render(pose, CameraView(), rc);
    const auto bs = oracle_render(pose, CameraView(Eigen::Vector3d(0, pi, 0)), rc);
    CHECK(((bs.pixels.array() > 0) == (flip_horizontal(fs).pixels.array() > 0)).all());
  }

  TEST_CASE("oracle: pose changes are visible") {
    RenderConfig rc;
    Rng rng(5);
    const auto rest = oracle_render(PoseVector::zero(), CameraView(), rc);
    for (int i = 0; i < 10; ++i) {
      const auto other = oracle_render(test::random_pose(rng, 0.8), CameraView(), rc);
      const auto differ = ((rest.pixels - other.pixels).array().abs() > 1e-9).count();
      CHECK(differ >= 0.01 * rc.pixel_count());
    }
  }

  TEST_CASE("psnr examples") {
    Image a(8, 8, 1, 0.0), b(8, 8, 1, 0.1);
    CHECK(psnr(a, a) == kPsnrCap);
    CHECK(psnr(a, b) == doctest::Approx(20.0));
    Rng rng(6);
    Image c(8, 8, 1), d(8, 8, 1);
    for (int i = 0; i < 64; ++i) {
      c.pixels(i) = uniform01(rng);
      d.pixels(i) = uniform01(rng);
    }
    CHECK(psnr(c, d) == psnr(d, c));
    CHECK_THROWS(psnr(a, Image(8, 9, 1)));
  }

  TEST_CASE("render config validation") {
    RenderConfig rc;
    rc.samples_per_ray = 1;
    CHECK_THROWS(rc.validate());
    rc = {};
    rc.near = 4.0;
    CHECK_THROWS(rc.validate());
    rc = {};
    rc.height = 4;
    CHECK_THROWS(rc.validate());
  }

  TEST_CASE("nerf loss terms") {
    RenderConfig rc;
    rc.height = rc.width = 16;
    rc.samples_per_ray = 8;
    const auto field = dense_field(10);
    NerfDataset data;
    Rng rng(7);
    for (int p = 0; p < 4; ++p) data.poses.push_back(test::random_pose(rng, 0.4));
    for (int i = 0; i < 8; ++i) {
      const CameraView k(Eigen::Vector3d(0, uniform(rng, -3, 3), 0));
      data.images.push_back(oracle_render(data.poses[i / 2], k, rc));
      data.frame.push_back(i / 2);
      data.views.push_back(k);
    }
    const std::vector<int> ids = {0, 3, 6};
    RaySet rays;
    std::vector<double> targets;
    for (int i = 0; i < 3; ++i)
      for (int p = 0; p < rc.pixel_count(); p += 7) {
        rays.pose_index.push_back(i);
        rays.directions.push_back(pixel_direction(rc, p % rc.width, p / rc.width));
        targets.push_back(data.images[ids[i]].pixels(p));
      }
    Eigen::MatrixXd labels(4, kPoseDim);
    for (int p = 0; p < 4; ++p) labels.row(p) = data.poses[p].values().transpose();

    NerfTrainConfig cfg;
    ad::Tape tape;
    auto fb = bind_field(tape, field, false);
    auto poses = tape.constant(labels);
    const auto plain = nerf_loss(fb, poses, poses, data, ids, rays, targets, cfg, rc, nullptr);
    CHECK(plain.total == plain.reconstruction);
    CHECK(plain.pose_deviation == 0.0);
    CHECK(plain.smoothness == 0.0);

    // Reconstruction is the mean absolute ray error.
    ad::Tape t2;
    auto fb2 = bind_field(t2, field, false);
    Eigen::MatrixXd fk_views(3, 3);
    for (int i = 0; i < 3; ++i) fk_views.row(i) = data.views[ids[i]].values().transpose();
    Eigen::MatrixXd fk_poses(3, kPoseDim);
    for (int i = 0; i < 3; ++i) fk_poses.row(i) = labels.row(data.frame[ids[i]]);
    auto col = render_rays(fb2, ops::forward_kinematics(t2.constant(fk_poses), skel()), ops::camera(t2.constant(fk_views), rc.radius),
                           rays, rc);
    double l1 = 0.0;
    for (std::size_t r = 0; r < rays.size(); ++r) l1 += std::abs(col.value()(r, 0) - targets[r]);
    CHECK(plain.reconstruction == doctest::Approx(l1 / rays.size()).epsilon(1e-12));

    cfg.lambda_theta = 0.5;
    cfg.lambda_t = 0.25;
    Eigen::MatrixXd shifted = labels;
    shifted(1, 4) += 0.2;
    auto sp = tape.constant(shifted);
    const auto full = nerf_loss(fb, sp, poses, data, ids, rays, targets, cfg, rc, nullptr);
    CHECK(full.pose_deviation == doctest::Approx(0.04));
    CHECK(full.total == doctest::Approx(full.reconstruction + 0.5 * full.pose_deviation + 0.25 * full.smoothness));
  }

  TEST_CASE("smoothness term") {
    ad::Tape tape;
    const Eigen::MatrixXd constant = Eigen::MatrixXd::Constant(5, 6, 0.3);
    CHECK(smoothness_term(tape.constant(constant)).scalar() == 0.0);
    Eigen::MatrixXd linear(4, 2);
    linear << 0, 0, 1, 2, 2, 4, 3, 6;
    CHECK(smoothness_term(tape.constant(linear)).scalar() == doctest::Approx(0.0).epsilon(1e-15));
    Eigen::MatrixXd bump = Eigen::MatrixXd::Zero(3, 2);
    bump(1, 0) = 1.0;  // second difference (-2, 0)
    CHECK(smoothness_term(tape.constant(bump)).scalar() == doctest::Approx(2.0));
  }

  TEST_CASE("field training reduces the loss and reports held-out quality") {
    RenderConfig rc;
    rc.height = rc.width = 16;
    rc.samples_per_ray = 16;
    NerfDataset data;
    Rng rng(11);
    for (int p = 0; p < 12; ++p) data.poses.push_back(test::random_pose(rng, 0.3));
    for (int p = 0; p < 12; ++p)
      for (int v = 0; v < 3; ++v) {
        const CameraView k = view_from_angles(0.0, uniform(rng, -pi, pi));
        data.images.push_back(oracle_render(data.poses[p], k, rc));
        data.frame.push_back(p);
        data.views.push_back(k);
      }
    FieldSpec fs;
    fs.hidden = {32, 32};
    NerfTrainConfig cfg;
    cfg.epochs = 6;
    cfg.steps_per_epoch = 20;
    cfg.rays_per_batch = 128;
    cfg.holdout_images = 3;
    cfg.psnr_floor = 5.0;
    const auto res = train_nerf(data, fs, cfg, rc, 1);
    REQUIRE(res.history.size() == 6);
    CHECK(res.history.back().reconstruction < res.history.front().reconstruction);
    CHECK(res.holdout_psnr > 5.0);
    CHECK(res.success);
    const auto again = train_nerf(data, fs, cfg, rc, 1);
    CHECK(again.holdout_psnr == res.holdout_psnr);

    NerfDataset one_view = data;
    for (auto& v : one_view.views) v = CameraView();
    CHECK_THROWS(train_nerf(one_view, fs, cfg, rc, 1));
  }

  TEST_CASE("training only on frontal views generalizes worse to top views") {
    RenderConfig rc;
    rc.height = rc.width = 24;
    rc.samples_per_ray = 16;
    NerfDataset data;
    Rng rng(12);
    const int poses = 30;
    for (int p = 0; p < poses; ++p) data.poses.push_back(test::random_pose(rng, 0.3));
    for (int p = 0; p < poses; ++p)
      for (double az : {-0.3, 0.3}) {
        const CameraView k = view_from_angles(0.0, az + uniform(rng, -0.1, 0.1));
        data.images.push_back(oracle_render(data.poses[p], k, rc));
        data.frame.push_back(p);
        data.views.push_back(k);
      }
    FieldSpec fs;
    fs.hidden = {64, 64, 64};
    NerfTrainConfig cfg;
    cfg.epochs = 8;
    cfg.steps_per_epoch = 30;
    cfg.rays_per_batch = 256;
    cfg.holdout_images = 0;
    cfg.psnr_floor = 0.0;
    const auto res = train_nerf(data, fs, cfg, rc, 2);
    std::vector<Image> front, top;
    std::vector<PoseVector> ps;
    std::vector<CameraView> kf, kt;
    for (int i = 0; i < 10; ++i) {
      const auto pose = test::random_pose(rng, 0.3);
      const CameraView f = view_from_angles(0.0, uniform(rng, -0.3, 0.3));
      const CameraView t = view_from_angles(1.2, uniform(rng, -0.3, 0.3));
      ps.push_back(pose);
      kf.push_back(f);
      kt.push_back(t);
      front.push_back(oracle_render(pose, f, rc));
      top.push_back(oracle_render(pose, t, rc));
    }
    const double pf = mean_psnr(res.field, front, ps, kf, rc);
    const double pt = mean_psnr(res.field, top, ps, kt, rc);
    MESSAGE("frontal ", pf, " dB, top ", pt, " dB");
    CHECK(pt < pf);
  }
}
