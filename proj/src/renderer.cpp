#include "posegen/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace posegen::render {

void RenderConfig::validate() const {
  if (height < 8 || width < 8) throw std::invalid_argument("RenderConfig: dimensions must be >= 8");
  if (samples_per_ray < 2) throw std::invalid_argument("RenderConfig: samples_per_ray must be >= 2");
  if (!(near < far) || !(near > 0.0)) throw std::invalid_argument("RenderConfig: need 0 < near < far");
  if (channels < 1) throw std::invalid_argument("RenderConfig: channels must be >= 1");
  if (background < 0.0 || background > 1.0) throw std::invalid_argument("RenderConfig: background outside [0, 1]");
  if (!(radius > 0.0)) throw std::invalid_argument("RenderConfig: radius must be positive");
  if (!(focal_scale > 0.0)) throw std::invalid_argument("RenderConfig: focal_scale must be positive");
}

Image::Image(int h, int w, int c, double fill)
    : height(h), width(w), channels(c), pixels(Eigen::VectorXd::Constant(static_cast<Eigen::Index>(h) * w * c, fill)) {}

double psnr(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("psnr: shape mismatch");
  const double mse = (a.pixels - b.pixels).squaredNorm() / static_cast<double>(a.pixels.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

Eigen::Vector3d pixel_direction(const RenderConfig& cfg, double x, double y) {
  const double f = cfg.focal();
  Eigen::Vector3d d((x + 0.5 - 0.5 * cfg.width) / f, (y + 0.5 - 0.5 * cfg.height) / f, 1.0);
  return d.normalized();
}

CompositeResult composite(const Eigen::VectorXd& sigmas, const Eigen::VectorXd& deltas, const Eigen::MatrixXd& colors) {
  const Eigen::Index q = sigmas.size();
  if (q < 1) throw std::invalid_argument("composite: need at least one sample");
  if (deltas.size() != q || colors.rows() != q) throw std::invalid_argument("composite: size mismatch");
  CompositeResult r;
  r.color = Eigen::VectorXd::Zero(colors.cols());
  r.weights.resize(q);
  r.transmittance.resize(q);
  double t = 1.0;
  for (Eigen::Index i = 0; i < q; ++i) {
    if (!(sigmas(i) >= 0.0)) throw std::invalid_argument("composite: negative density");
    if (!(deltas(i) > 0.0)) throw std::invalid_argument("composite: non-positive delta");
    const double tau = sigmas(i) * deltas(i);
    const double alpha = -std::expm1(-tau);
    r.transmittance(i) = t;
    r.weights(i) = t * alpha;
    r.color += r.weights(i) * colors.row(i).transpose();
    t *= std::exp(-tau);
  }
  r.final_transmittance = t;
  return r;
}

// ---------------------------------------------------------------------------

namespace {

struct BoneQuery {
  Eigen::Vector3d q;     // point in parent-joint frame
  Eigen::Vector3d diff;  // q - closest point on the bone segment
  double dist = 0.0;
};

inline BoneQuery query_bone(const Eigen::Vector3d& local, const Eigen::Vector3d& offset) {
  BoneQuery b;
  b.q = local;
  const double len2 = offset.squaredNorm();
  const double u = len2 > 0.0 ? std::clamp(local.dot(offset) / len2, 0.0, 1.0) : 0.0;
  b.diff = local - u * offset;
  b.dist = b.diff.norm();
  return b;
}

struct Cutoff {
  double inner, outer;
  // smoothstep falloff: value and derivative w.r.t. distance
  void eval(double d, double& m, double& dm) const {
    if (d <= inner) {
      m = 1.0;
      dm = 0.0;
    } else if (d >= outer) {
      m = 0.0;
      dm = 0.0;
    } else {
      const double w = outer - inner;
      const double s = (outer - d) / w;
      m = s * s * (3.0 - 2.0 * s);
      dm = -6.0 * s * (1.0 - s) / w;
    }
  }
};

struct PoseFrames {
  std::vector<Eigen::Matrix3d> rot;
  std::vector<Eigen::Vector3d> pos;
};

PoseFrames frames_from_fk_row(const Eigen::MatrixXd& fk, Eigen::Index row, int joints) {
  PoseFrames f;
  f.rot.resize(joints);
  f.pos.resize(joints);
  for (int j = 0; j < joints; ++j) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) f.rot[j](r, c) = fk(row, j * ops::kFkStride + 3 * r + c);
    for (int a = 0; a < 3; ++a) f.pos[j](a) = fk(row, j * ops::kFkStride + 9 + a);
  }
  return f;
}

struct Hit {
  int joint;  // bone ends at this joint; frame is its parent's
  double m, dm;
  BoneQuery bq;
};

struct EncodedSamples {
  std::vector<int> ray;        // ray of each active sample (sorted by ray, then depth)
  std::vector<double> depth;   // distance along the ray
  std::vector<int> hit_begin;  // hits of sample s: [hit_begin[s], hit_begin[s+1])
  std::vector<Hit> hits;
};

}  // namespace

Eigen::VectorXd bone_relative_encode(const Eigen::Vector3d& point, const Kinematics& kin, const SkeletonDef& skel) {
  const int n = skel.joint_count();
  Eigen::VectorXd f(4 * (n - 1));
  for (int j = 1; j < n; ++j) {
    const int a = skel.parent(j);
    const Eigen::Vector3d local = kin.rotations[a].transpose() * (point - kin.positions.row(a).transpose());
    const BoneQuery b = query_bone(local, skel.rest_offset(j));
    f.segment<3>(4 * (j - 1)) = b.q;
    f(4 * (j - 1) + 3) = b.dist;
  }
  return f;
}

Eigen::VectorXd bone_relative_encode(const Eigen::Vector3d& point, const PoseVector& theta, const SkeletonDef& skel) {
  return bone_relative_encode(point, pose_kinematics(skel, theta.values()), skel);
}

RadianceField::RadianceField(FieldSpec spec, const SkeletonDef& skel, std::uint64_t seed) : spec_(std::move(spec)) {
  if (!(spec_.cutoff_inner >= 0.0 && spec_.cutoff_inner < spec_.cutoff_outer))
    throw std::invalid_argument("FieldSpec: need 0 <= cutoff_inner < cutoff_outer");
  if (spec_.channels < 1) throw std::invalid_argument("FieldSpec: channels must be >= 1");
  Rng rng(seed);
  nn::MlpSpec m;
  m.input = spec_.input_dim(skel);
  m.hidden = spec_.hidden;
  m.output = 1 + spec_.channels;
  m.activation = spec_.activation;
  mlp_ = nn::Mlp(m, rng, 0.5);
}

void RadianceField::make_empty() {
  auto& p = mlp_.params;
  p.values[p.size() - 2].col(0).setZero();
  p.values[p.size() - 1](0, 0) = -1000.0;  // softplus(-1000) == 0 in double precision
  empty_ = true;
}

RaySet image_rays(const RenderConfig& cfg, int images) {
  RaySet rays;
  const std::size_t n = static_cast<std::size_t>(images) * cfg.pixel_count();
  rays.pose_index.reserve(n);
  rays.directions.reserve(n);
  std::vector<Eigen::Vector3d> dirs;
  dirs.reserve(cfg.pixel_count());
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x) dirs.push_back(pixel_direction(cfg, x, y));
  for (int b = 0; b < images; ++b) {
    for (const auto& d : dirs) {
      rays.pose_index.push_back(b);
      rays.directions.push_back(d);
    }
  }
  return rays;
}

FieldBinding bind_field(ad::Tape& tape, const RadianceField& field, bool requires_grad) {
  FieldBinding b;
  b.field = &field;
  b.params = field.params().bind(tape, requires_grad);
  return b;
}

namespace {

ad::Var encode_samples(ad::Var fk, ad::Var cam, const RaySet& rays, const RenderConfig& cfg, const FieldSpec& spec,
                       const SkeletonDef& skel, std::shared_ptr<EncodedSamples>& out_meta) {
  const int n = skel.joint_count();
  const int bones = n - 1;
  const int width = 5 * bones + 1;
  const Eigen::MatrixXd& fkv = fk.value();
  const Eigen::MatrixXd& camv = cam.value();
  const Eigen::Index poses = fkv.rows();
  if (camv.rows() != poses) throw std::invalid_argument("render: fk/camera row mismatch");
  if (fkv.cols() != n * ops::kFkStride) throw std::invalid_argument("render: fk width mismatch");

  std::vector<PoseFrames> frames(poses);
  std::vector<Eigen::Matrix3d> r_wc(poses);
  std::vector<Eigen::Vector3d> center(poses);
  for (Eigen::Index p = 0; p < poses; ++p) {
    frames[p] = frames_from_fk_row(fkv, p, n);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) r_wc[p](r, c) = camv(p, 3 * r + c);
    center[p] = camv.row(p).segment<3>(9).transpose();
  }

  const Cutoff cut{spec.cutoff_inner, spec.cutoff_outer};
  const double scale = spec.cutoff_outer;
  const double delta = cfg.delta();
  auto meta = std::make_shared<EncodedSamples>();
  std::vector<double> rows;  // flattened feature rows
  std::vector<int> candidates;
  candidates.reserve(bones);

  for (std::size_t r = 0; r < rays.size(); ++r) {
    const int p = rays.pose_index[r];
    if (p < 0 || p >= poses) throw std::out_of_range("render: ray pose index");
    const Eigen::Vector3d dw = r_wc[p].transpose() * rays.directions[r];
    const Eigen::Vector3d& o = center[p];
    const auto& fr = frames[p];
    candidates.clear();
    for (int j = 1; j < n; ++j) {
      const Eigen::Vector3d& a = fr.pos[skel.parent(j)];
      const Eigen::Vector3d& b = fr.pos[j];
      const Eigen::Vector3d mid = 0.5 * (a + b);
      const double rad = 0.5 * (b - a).norm() + spec.cutoff_outer;
      const Eigen::Vector3d v = mid - o;
      const double tc = v.dot(dw);
      const double d2 = v.squaredNorm() - tc * tc;
      if (d2 < rad * rad && tc + rad >= cfg.near && tc - rad <= cfg.far) candidates.push_back(j);
    }
    if (candidates.empty()) continue;
    const double shift = rays.jitter.empty() ? 0.5 : rays.jitter[r];
    for (int i = 0; i < cfg.samples_per_ray; ++i) {
      const double t = cfg.near + (i + shift) * delta;
      const Eigen::Vector3d x = o + t * dw;
      const std::size_t first = meta->hits.size();
      for (int j : candidates) {
        const int a = skel.parent(j);
        const Eigen::Vector3d local = fr.rot[a].transpose() * (x - fr.pos[a]);
        BoneQuery bq = query_bone(local, skel.rest_offset(j));
        if (bq.dist >= spec.cutoff_outer) continue;
        Hit h;
        h.joint = j;
        h.bq = bq;
        cut.eval(bq.dist, h.m, h.dm);
        meta->hits.push_back(h);
      }
      if (meta->hits.size() == first) continue;
      meta->ray.push_back(static_cast<int>(r));
      meta->depth.push_back(t);
      meta->hit_begin.push_back(static_cast<int>(first));
      const std::size_t base = rows.size();
      rows.resize(base + width, 0.0);
      double keep = 1.0;
      for (std::size_t k = first; k < meta->hits.size(); ++k) {
        const Hit& h = meta->hits[k];
        const int c = 5 * (h.joint - 1);
        for (int e = 0; e < 3; ++e) rows[base + c + e] = h.m * h.bq.q(e) / scale;
        rows[base + c + 3] = h.m * h.bq.dist / scale;
        rows[base + c + 4] = h.m;
        keep *= 1.0 - h.m;
      }
      rows[base + width - 1] = 1.0 - keep;
    }
  }
  meta->hit_begin.push_back(static_cast<int>(meta->hits.size()));

  const Eigen::Index m = static_cast<Eigen::Index>(meta->ray.size());
  Eigen::MatrixXd feat(m, width);
  for (Eigen::Index s = 0; s < m; ++s)
    feat.row(s) = Eigen::Map<const Eigen::RowVectorXd>(rows.data() + s * width, width);
  out_meta = meta;

  const SkeletonDef* sk = &skel;
  auto rs = std::make_shared<const RaySet>(rays);
  return fk.tape->record(
      std::move(feat), {fk, cam},
      [fk, cam, meta, sk, rs, scale, width, frames, r_wc, center](ad::Tape& t, const Eigen::MatrixXd& g) {
        const SkeletonDef& skel = *sk;
        const int n = skel.joint_count();
        const Eigen::Index poses = static_cast<Eigen::Index>(frames.size());
        Eigen::MatrixXd gfk = Eigen::MatrixXd::Zero(poses, n * ops::kFkStride);
        Eigen::MatrixXd gcam = Eigen::MatrixXd::Zero(poses, ops::kCameraWidth);
        const Eigen::Index m = static_cast<Eigen::Index>(meta->ray.size());
        for (Eigen::Index s = 0; s < m; ++s) {
          const int r = meta->ray[s];
          const int p = rs->pose_index[r];
          const Eigen::Vector3d dw = r_wc[p].transpose() * rs->directions[r];
          const double depth = meta->depth[s];
          const Eigen::Vector3d x = center[p] + depth * dw;
          const int b0 = meta->hit_begin[s], b1 = meta->hit_begin[s + 1];
          const double g_union = g(s, width - 1);
          Eigen::Vector3d gx = Eigen::Vector3d::Zero();
          for (int k = b0; k < b1; ++k) {
            const Hit& h = meta->hits[k];
            const int c = 5 * (h.joint - 1);
            // d(union)/d(m_k) = prod_{other hits} (1 - m)
            double others = 1.0;
            for (int o = b0; o < b1; ++o)
              if (o != k) others *= 1.0 - meta->hits[o].m;
            const Eigen::Vector3d gfq(g(s, c), g(s, c + 1), g(s, c + 2));
            const double gm = g(s, c + 4) + g_union * others + gfq.dot(h.bq.q) / scale + g(s, c + 3) * h.bq.dist / scale;
            Eigen::Vector3d gq = gfq * (h.m / scale);
            const double gd = g(s, c + 3) * h.m / scale + gm * h.dm;
            if (h.bq.dist > 0.0) gq += gd * h.bq.diff / h.bq.dist;
            const int a = skel.parent(h.joint);
            const Eigen::Matrix3d& rot = frames[p].rot[a];
            const Eigen::Vector3d rel = x - frames[p].pos[a];
            const Eigen::Matrix3d grot = rel * gq.transpose();
            const Eigen::Vector3d world = rot * gq;
            for (int rr = 0; rr < 3; ++rr)
              for (int cc = 0; cc < 3; ++cc) gfk(p, a * ops::kFkStride + 3 * rr + cc) += grot(rr, cc);
            for (int e = 0; e < 3; ++e) gfk(p, a * ops::kFkStride + 9 + e) -= world(e);
            gx += world;
          }
          // x = R^T y + C with y = depth * d_cam
          const Eigen::Vector3d y = depth * rs->directions[r];
          const Eigen::Matrix3d gr = y * gx.transpose();
          for (int rr = 0; rr < 3; ++rr)
            for (int cc = 0; cc < 3; ++cc) gcam(p, 3 * rr + cc) += gr(rr, cc);
          for (int e = 0; e < 3; ++e) gcam(p, 9 + e) += gx(e);
        }
        if (t.requires_grad(fk)) t.accumulate(fk, gfk);
        if (t.requires_grad(cam)) t.accumulate(cam, gcam);
      });
}

ad::Var composite_op(ad::Var sigma, ad::Var colors, std::shared_ptr<const EncodedSamples> meta, std::size_t ray_count,
                     int rays_per_row, double delta, double background) {
  const int ch = static_cast<int>(colors.cols());
  const Eigen::Index rows_out = static_cast<Eigen::Index>(ray_count / rays_per_row);
  Eigen::MatrixXd out = Eigen::MatrixXd::Constant(rows_out, static_cast<Eigen::Index>(rays_per_row) * ch, background);
  // ray start offsets into the sample list
  auto starts = std::make_shared<std::vector<std::pair<int, int>>>();  // (ray, first sample)
  const auto& rays = meta->ray;
  for (std::size_t s = 0; s < rays.size(); ++s)
    if (s == 0 || rays[s] != rays[s - 1]) starts->emplace_back(rays[s], static_cast<int>(s));
  starts->emplace_back(-1, static_cast<int>(rays.size()));
  const Eigen::MatrixXd& sv = sigma.value();
  const Eigen::MatrixXd& cv = colors.value();
  for (std::size_t k = 0; k + 1 < starts->size(); ++k) {
    const int ray = (*starts)[k].first;
    const int s0 = (*starts)[k].second, s1 = (*starts)[k + 1].second;
    double tr = 1.0;
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(ch);
    for (int s = s0; s < s1; ++s) {
      const double tau = sv(s, 0) * delta;
      const double w = tr * -std::expm1(-tau);
      acc += w * cv.row(s).transpose();
      tr *= std::exp(-tau);
    }
    acc.array() += tr * background;
    const Eigen::Index row = ray / rays_per_row;
    const Eigen::Index col = static_cast<Eigen::Index>(ray % rays_per_row) * ch;
    out.row(row).segment(col, ch) = acc.transpose();
  }
  return sigma.tape->record(
      std::move(out), {sigma, colors},
      [sigma, colors, starts, rays_per_row, delta, background, ch](ad::Tape& t, const Eigen::MatrixXd& g) {
        const Eigen::MatrixXd& sv = t.value(sigma);
        const Eigen::MatrixXd& cv = t.value(colors);
        Eigen::MatrixXd gs = Eigen::MatrixXd::Zero(sv.rows(), 1);
        Eigen::MatrixXd gc = Eigen::MatrixXd::Zero(cv.rows(), cv.cols());
        std::vector<double> trans, weight;
        for (std::size_t k = 0; k + 1 < starts->size(); ++k) {
          const int ray = (*starts)[k].first;
          const int s0 = (*starts)[k].second, s1 = (*starts)[k + 1].second;
          const Eigen::Index row = ray / rays_per_row;
          const Eigen::Index col = static_cast<Eigen::Index>(ray % rays_per_row) * ch;
          const Eigen::VectorXd go = g.row(row).segment(col, ch).transpose();
          const int q = s1 - s0;
          trans.assign(q + 1, 1.0);
          weight.assign(q, 0.0);
          for (int i = 0; i < q; ++i) {
            const double tau = sv(s0 + i, 0) * delta;
            weight[i] = trans[i] * -std::expm1(-tau);
            trans[i + 1] = trans[i] * std::exp(-tau);
          }
          const double t_end = trans[q];
          // suffix[i] = go . sum_{k > i} w_k c_k
          double suffix = 0.0;
          for (int i = q - 1; i >= 0; --i) {
            const Eigen::VectorXd c = cv.row(s0 + i).transpose();
            gc.row(s0 + i) = weight[i] * go.transpose();
            gs(s0 + i, 0) = delta * (trans[i + 1] * go.dot(c) - suffix - t_end * background * go.sum());
            suffix += weight[i] * go.dot(c);
          }
        }
        if (t.requires_grad(sigma)) t.accumulate(sigma, gs);
        if (t.requires_grad(colors)) t.accumulate(colors, gc);
      });
}

ad::Var render_rays_impl(const FieldBinding& field, ad::Var fk, ad::Var cam, const RaySet& rays,
                         const RenderConfig& cfg, const SkeletonDef& skel, int rays_per_row) {
  cfg.validate();
  const FieldSpec& spec = field.field->spec();
  if (spec.channels != cfg.channels) throw std::invalid_argument("render: field/config channel mismatch");
  ad::Tape& tape = *fk.tape;
  if (rays.size() % rays_per_row != 0) throw std::invalid_argument("render: ray count not divisible by row size");
  std::shared_ptr<EncodedSamples> meta;
  ad::Var enc = encode_samples(fk, cam, rays, cfg, spec, skel, meta);
  if (enc.rows() == 0) {
    return tape.constant(Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(rays.size() / rays_per_row),
                                                   static_cast<Eigen::Index>(rays_per_row) * cfg.channels,
                                                   cfg.background));
  }
  ad::Var h = field.field->mlp().forward(tape, field.params, enc);
  ad::Var sigma = ad::mul(ad::softplus(ad::slice_cols(h, 0, 1)), ad::slice_cols(enc, enc.cols() - 1, 1));
  ad::Var colors = ad::sigmoid(ad::slice_cols(h, 1, cfg.channels));
  return composite_op(sigma, colors, meta, rays.size(), rays_per_row, cfg.delta(), cfg.background);
}

}  // namespace

ad::Var render_rays(const FieldBinding& field, ad::Var fk, ad::Var cam, const RaySet& rays, const RenderConfig& cfg,
                    const SkeletonDef& skel) {
  return render_rays_impl(field, fk, cam, rays, cfg, skel, 1);
}

ad::Var render_images(const FieldBinding& field, ad::Var theta, ad::Var views, const RenderConfig& cfg,
                      const SkeletonDef& skel) {
  if (theta.rows() != views.rows()) throw std::invalid_argument("render_images: batch mismatch");
  ad::Var fk = ops::forward_kinematics(theta, skel);
  ad::Var cam = ops::camera(views, cfg.radius);
  const RaySet rays = image_rays(cfg, static_cast<int>(theta.rows()));
  return render_rays_impl(field, fk, cam, rays, cfg, skel, cfg.pixel_count());
}

Image image_from_row(const Eigen::RowVectorXd& row, const RenderConfig& cfg) {
  Image img(cfg.height, cfg.width, cfg.channels);
  if (row.size() != img.pixels.size()) throw std::invalid_argument("image_from_row: size mismatch");
  img.pixels = row.transpose().cwiseMax(0.0).cwiseMin(1.0);
  return img;
}

Image render(const PoseVector& theta, const CameraView& k, const RadianceField& field, const RenderConfig& cfg) {
  ad::Tape tape;
  FieldBinding fb = bind_field(tape, field, false);
  ad::Var th = tape.constant(theta.values().transpose());
  ad::Var kv = tape.constant(k.values().transpose());
  ad::Var img = render_images(fb, th, kv, cfg);
  return image_from_row(img.value().row(0), cfg);
}

// ---------------------------------------------------------------------------

Capsule capsule_for_joint(int j) {
  switch (j) {
    case 1: case 2: return {0.085, 0.70};    // hips
    case 3: case 6: case 9: return {0.12, 0.80};  // spine
    case 4: case 5: return {0.075, 0.70};    // thighs
    case 7: case 8: return {0.055, 0.70};    // shins
    case 10: case 11: return {0.045, 0.70};  // feet
    case 12: return {0.06, 0.90};            // neck
    case 15: return {0.10, 0.90};            // head
    case 13: case 14: return {0.06, 0.80};   // collars
    case 16: case 17: return {0.055, 0.60};  // shoulders
    case 18: case 19: return {0.05, 0.60};   // upper arms
    case 20: case 21: return {0.045, 0.60};  // forearms
    case 22: case 23: return {0.04, 0.60};   // hands
    default: return {0.05, 0.70};
  }
}

Image oracle_render(const PoseVector& theta, const CameraView& k, const RenderConfig& cfg, const OracleStyle& style,
                    const Eigen::Matrix3d& root_rotation) {
  cfg.validate();
  const SkeletonDef& skel = SkeletonDef::standard();
  const Kinematics kin = pose_kinematics(skel, theta.values(), root_rotation);
  const RigidTransform ext = camera_extrinsics(k, cfg.radius);
  const Eigen::Vector3d o = ext.center();
  const double f = cfg.focal();
  const int n = skel.joint_count();

  struct Layer {
    double depth, alpha, value;
  };
  std::vector<Layer> layers;
  Image img(cfg.height, cfg.width, cfg.channels, cfg.background);
  for (int y = 0; y < cfg.height; ++y) {
    for (int x = 0; x < cfg.width; ++x) {
      const Eigen::Vector3d d = ext.rotation.transpose() * pixel_direction(cfg, x, y);
      layers.clear();
      for (int j = 1; j < n; ++j) {
        const int a = skel.parent(j);
        const Eigen::Vector3d pa = kin.positions.row(a).transpose();
        const Eigen::Vector3d u = kin.positions.row(j).transpose() - pa;
        const Eigen::Vector3d w0 = o - pa;
        const double b = d.dot(u), c = u.dot(u), dd = d.dot(w0), e = u.dot(w0);
        const double denom = c - b * b;
        double s = denom > 1e-12 ? (e - b * dd) / denom : 0.0;
        s = std::clamp(s, 0.0, 1.0);
        const double t = std::max(0.0, s * b - dd);
        const Eigen::Vector3d closest = pa + s * u;
        const double dist = (o + t * d - closest).norm();
        const Capsule cap = capsule_for_joint(j);
        const double footprint = t / f;
        const double alpha = std::clamp((cap.radius - dist) / footprint + 0.5, 0.0, 1.0);
        if (alpha <= 0.0) continue;
        const double t_hit = t - std::sqrt(std::max(cap.radius * cap.radius - dist * dist, 0.0));
        const Eigen::Vector3d hit = o + t_hit * d;
        const double sh = c > 0.0 ? std::clamp((hit - pa).dot(u) / c, 0.0, 1.0) : 0.0;
        Eigen::Vector3d normal = hit - (pa + sh * u);
        const double nn = normal.norm();
        normal = nn > 1e-12 ? Eigen::Vector3d(normal / nn) : Eigen::Vector3d(-d);
        const double facing = (kin.rotations[a].transpose() * normal).z();
        const double value =
            cap.gray * (1.0 - style.front_shading + style.front_shading * (0.5 + 0.5 * facing));
        layers.push_back({t_hit, alpha, value});
      }
      if (layers.empty()) continue;
      std::sort(layers.begin(), layers.end(), [](const Layer& l, const Layer& r) { return l.depth < r.depth; });
      double tr = 1.0, acc = 0.0;
      for (const auto& l : layers) {
        acc += tr * l.alpha * l.value;
        tr *= 1.0 - l.alpha;
      }
      acc += tr * cfg.background;
      for (int ch = 0; ch < cfg.channels; ++ch) img.at(y, x, ch) = std::clamp(acc, 0.0, 1.0);
    }
  }
  return img;
}

// ---------------------------------------------------------------------------

void NerfTrainConfig::validate() const {
  if (lambda_theta < 0.0 || lambda_t < 0.0) throw std::invalid_argument("NerfTrainConfig: weights must be >= 0");
  if (epochs < 1 || steps_per_epoch < 1 || rays_per_batch < 1)
    throw std::invalid_argument("NerfTrainConfig: epochs, steps and rays must be >= 1");
  if (!(learning_rate > 0.0) || !(final_learning_rate > 0.0) || !(pose_learning_rate > 0.0))
    throw std::invalid_argument("NerfTrainConfig: learning rates must be positive");
  if (foreground_fraction < 0.0 || foreground_fraction > 1.0)
    throw std::invalid_argument("NerfTrainConfig: foreground_fraction outside [0, 1]");
  if (patience < 1) throw std::invalid_argument("NerfTrainConfig: patience must be >= 1");
  if (holdout_images < 0) throw std::invalid_argument("NerfTrainConfig: holdout_images must be >= 0");
}

namespace {

ad::Var gather_rows(ad::Var a, const std::vector<int>& rows) {
  const Eigen::MatrixXd& v = a.value();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), v.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(i) = v.row(rows[i]);
  const Eigen::Index src_rows = v.rows();
  return a.tape->record(std::move(out), {a}, [a, rows, src_rows](ad::Tape& t, const Eigen::MatrixXd& g) {
    Eigen::MatrixXd ga = Eigen::MatrixXd::Zero(src_rows, g.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) ga.row(rows[i]) += g.row(i);
    t.accumulate(a, ga);
  });
}

ad::Var abs_op(ad::Var a) {
  Eigen::MatrixXd out = a.value().cwiseAbs();
  return a.tape->record(std::move(out), {a}, [a](ad::Tape& t, const Eigen::MatrixXd& g) {
    const Eigen::MatrixXd& v = t.value(a);
    t.accumulate(a, g.cwiseProduct(v.unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); })));
  });
}

// Per-row L2 norm, summed. The subgradient at a zero row is taken as zero.
ad::Var sum_row_norms(ad::Var a) {
  const Eigen::VectorXd norms = a.value().rowwise().norm();
  Eigen::MatrixXd out(1, 1);
  out(0, 0) = norms.sum();
  return a.tape->record(std::move(out), {a}, [a, norms](ad::Tape& t, const Eigen::MatrixXd& g) {
    const Eigen::MatrixXd& v = t.value(a);
    Eigen::MatrixXd ga = Eigen::MatrixXd::Zero(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i)
      if (norms(i) > 0.0) ga.row(i) = g(0, 0) * v.row(i) / norms(i);
    t.accumulate(a, ga);
  });
}

void check_dataset(const NerfDataset& d) {
  if (d.images.empty()) throw std::invalid_argument("train_nerf: no images");
  if (d.frame.size() != d.images.size() || d.views.size() != d.images.size())
    throw std::invalid_argument("train_nerf: labels inconsistent with images");
  for (int f : d.frame)
    if (f < 0 || f >= static_cast<int>(d.poses.size())) throw std::invalid_argument("train_nerf: frame out of range");
  bool two_views = false;
  for (const auto& v : d.views)
    if ((v.values() - d.views.front().values()).norm() > 1e-12) two_views = true;
  if (!two_views) throw std::invalid_argument("train_nerf: need at least 2 distinct views");
}

Eigen::MatrixXd pose_matrix(const std::vector<PoseVector>& poses) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(poses.size()), kPoseDim);
  for (std::size_t i = 0; i < poses.size(); ++i) m.row(i) = poses[i].values().transpose();
  return m;
}

}  // namespace

ad::Var smoothness_term(ad::Var poses) {
  const Eigen::Index n = poses.rows();
  if (n < 3) return poses.tape->constant(Eigen::MatrixXd::Zero(1, 1));
  ad::Var next = ad::slice_rows(poses, 2, n - 2);
  ad::Var mid = ad::slice_rows(poses, 1, n - 2);
  ad::Var prev = ad::slice_rows(poses, 0, n - 2);
  return sum_row_norms(next - mid * 2.0 + prev);
}

ad::Var pose_deviation_term(ad::Var poses, ad::Var labels) { return ad::sum(ad::square(poses - labels)); }

NerfLossTerms nerf_loss(const FieldBinding& field, ad::Var poses, ad::Var labels, const NerfDataset& data,
                        const std::vector<int>& image_ids, const RaySet& rays, const std::vector<double>& targets,
                        const NerfTrainConfig& cfg, const RenderConfig& rcfg, ad::Var* total_out) {
  ad::Tape& tape = *poses.tape;
  const SkeletonDef& skel = SkeletonDef::standard();
  if (targets.size() != rays.size() * static_cast<std::size_t>(rcfg.channels))
    throw std::invalid_argument("nerf_loss: target count mismatch");
  std::vector<int> frames(image_ids.size());
  Eigen::MatrixXd views(static_cast<Eigen::Index>(image_ids.size()), 3);
  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    frames[i] = data.frame[image_ids[i]];
    views.row(i) = data.views[image_ids[i]].values().transpose();
  }
  ad::Var fk = ops::forward_kinematics(gather_rows(poses, frames), skel);
  ad::Var cam = ops::camera(tape.constant(views), rcfg.radius);
  ad::Var color = render_rays(field, fk, cam, rays, rcfg, skel);
  Eigen::MatrixXd target = Eigen::Map<const Eigen::MatrixXd>(targets.data(), rcfg.channels,
                                                             static_cast<Eigen::Index>(rays.size()))
                               .transpose();
  ad::Var recon = ad::mean(abs_op(color - tape.constant(target)));
  ad::Var total = recon;
  NerfLossTerms terms;
  terms.reconstruction = recon.scalar();
  if (cfg.lambda_theta > 0.0) {
    ad::Var dev = pose_deviation_term(poses, labels);
    terms.pose_deviation = dev.scalar();
    total = total + dev * cfg.lambda_theta;
  }
  if (cfg.lambda_t > 0.0) {
    ad::Var sm = smoothness_term(poses);
    terms.smoothness = sm.scalar();
    total = total + sm * cfg.lambda_t;
  }
  terms.total = total.scalar();
  if (total_out) *total_out = total;
  return terms;
}

NerfTrainResult train_nerf(const NerfDataset& data, const FieldSpec& spec, const NerfTrainConfig& cfg,
                           const RenderConfig& rcfg, std::uint64_t seed) {
  cfg.validate();
  rcfg.validate();
  check_dataset(data);
  const SkeletonDef& skel = SkeletonDef::standard();
  for (const auto& img : data.images)
    if (img.height != rcfg.height || img.width != rcfg.width || img.channels != rcfg.channels)
      throw std::invalid_argument("train_nerf: image shape differs from render config");

  Rng rng(derive_seed(seed, "nerf/sampling"));
  NerfTrainResult res;
  res.field = RadianceField(spec, skel, derive_seed(seed, "nerf/init"));

  // Hold out whole frames so held-out images show unseen poses.
  const int n_frames = static_cast<int>(data.poses.size());
  std::vector<int> frame_order(n_frames);
  for (int i = 0; i < n_frames; ++i) frame_order[i] = i;
  for (int i = n_frames - 1; i > 0; --i) std::swap(frame_order[i], frame_order[uniform_index(rng, i + 1)]);
  std::vector<std::vector<int>> images_of(n_frames);
  for (std::size_t i = 0; i < data.images.size(); ++i) images_of[data.frame[i]].push_back(static_cast<int>(i));
  std::vector<char> held(data.images.size(), 0);
  int held_count = 0;
  for (int f : frame_order) {
    if (held_count >= cfg.holdout_images) break;
    if (images_of[f].empty()) continue;
    for (int i : images_of[f]) held[i] = 1;
    held_count += static_cast<int>(images_of[f].size());
  }
  std::vector<int> train_ids, held_ids;
  for (std::size_t i = 0; i < data.images.size(); ++i) (held[i] ? held_ids : train_ids).push_back(static_cast<int>(i));
  if (train_ids.empty()) throw std::invalid_argument("train_nerf: holdout leaves no training images");

  // Foreground pixel lists for biased ray sampling.
  const int pixels = rcfg.pixel_count();
  std::vector<std::pair<int, int>> foreground;
  for (int i : train_ids)
    for (int p = 0; p < pixels; ++p) {
      bool fg = false;
      for (int c = 0; c < rcfg.channels; ++c)
        if (std::abs(data.images[i].pixels(p * rcfg.channels + c) - rcfg.background) > 1e-6) fg = true;
      if (fg) foreground.emplace_back(i, p);
    }

  ad::ParamSet pose_params;
  const Eigen::MatrixXd labels = pose_matrix(data.poses);
  pose_params.add("poses", labels);
  ad::Adam field_opt(cfg.learning_rate);
  ad::Adam pose_opt(cfg.pose_learning_rate);
  const long total_steps = static_cast<long>(cfg.epochs) * cfg.steps_per_epoch;
  const double decay = std::log(cfg.final_learning_rate / cfg.learning_rate);

  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    NerfLossTerms mean_terms;
    for (int s = 0; s < cfg.steps_per_epoch; ++s, ++step) {
      const double frac = total_steps > 1 ? static_cast<double>(step) / static_cast<double>(total_steps - 1) : 0.0;
      field_opt.set_learning_rate(cfg.learning_rate * std::exp(decay * frac));

      // Batch: rays grouped by image so each image contributes one pose/camera row.
      std::vector<std::pair<int, int>> picks(cfg.rays_per_batch);
      for (auto& pk : picks) {
        if (!foreground.empty() && uniform01(rng) < cfg.foreground_fraction) {
          pk = foreground[uniform_index(rng, foreground.size())];
        } else {
          pk = {train_ids[uniform_index(rng, train_ids.size())], static_cast<int>(uniform_index(rng, pixels))};
        }
      }
      std::sort(picks.begin(), picks.end());
      std::vector<int> image_ids;
      RaySet rays;
      std::vector<double> targets;
      for (const auto& [img, p] : picks) {
        if (image_ids.empty() || image_ids.back() != img) image_ids.push_back(img);
        rays.pose_index.push_back(static_cast<int>(image_ids.size()) - 1);
        rays.directions.push_back(pixel_direction(rcfg, p % rcfg.width, p / rcfg.width));
        if (cfg.jitter) rays.jitter.push_back(uniform01(rng));
        for (int c = 0; c < rcfg.channels; ++c) targets.push_back(data.images[img].pixels(p * rcfg.channels + c));
      }

      ad::Tape tape;
      FieldBinding fb = bind_field(tape, res.field, true);
      ad::Var poses = tape.leaf(pose_params.values[0], cfg.pose_refinement);
      ad::Var lab = tape.constant(labels);
      ad::Var total;
      const NerfLossTerms terms = nerf_loss(fb, poses, lab, data, image_ids, rays, targets, cfg, rcfg, &total);
      if (!std::isfinite(terms.total)) throw std::runtime_error("train_nerf: non-finite loss at step " + std::to_string(step));
      tape.backward(total);
      field_opt.step(res.field.params(), ad::gradients(tape, fb.params));
      if (cfg.pose_refinement) pose_opt.step(pose_params, ad::gradients(tape, {poses}));
      mean_terms.reconstruction += terms.reconstruction / cfg.steps_per_epoch;
      mean_terms.pose_deviation += terms.pose_deviation / cfg.steps_per_epoch;
      mean_terms.smoothness += terms.smoothness / cfg.steps_per_epoch;
      mean_terms.total += terms.total / cfg.steps_per_epoch;
    }
    res.history.push_back(mean_terms);
    if (mean_terms.reconstruction < best) {
      best = mean_terms.reconstruction;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      throw std::runtime_error("train_nerf: reconstruction loss has not decreased for " + std::to_string(cfg.patience) +
                               " epochs (best " + std::to_string(best) + ")");
    }
  }

  for (int f = 0; f < n_frames; ++f)
    res.refined_poses.emplace_back(Eigen::VectorXd(pose_params.values[0].row(f).transpose()));
  if (held_ids.empty()) {
    res.holdout_psnr = 0.0;
    res.success = false;
    res.diagnostic = "no held-out images";
    return res;
  }
  std::vector<Image> imgs;
  std::vector<PoseVector> ps;
  std::vector<CameraView> vs;
  for (int i : held_ids) {
    imgs.push_back(data.images[i]);
    ps.push_back(data.poses[data.frame[i]]);
    vs.push_back(data.views[i]);
  }
  res.holdout_psnr = mean_psnr(res.field, imgs, ps, vs, rcfg);
  res.success = res.holdout_psnr >= cfg.psnr_floor;
  res.diagnostic = "held-out PSNR " + std::to_string(res.holdout_psnr) + " dB over " + std::to_string(held_ids.size()) +
                   " images (floor " + std::to_string(cfg.psnr_floor) + ")";
  return res;
}

double mean_psnr(const RadianceField& field, const std::vector<Image>& images, const std::vector<PoseVector>& poses,
                 const std::vector<CameraView>& views, const RenderConfig& cfg) {
  if (images.empty() || images.size() != poses.size() || images.size() != views.size())
    throw std::invalid_argument("mean_psnr: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) total += psnr(render(poses[i], views[i], field, cfg), images[i]);
  return total / static_cast<double>(images.size());
}

}  // namespace posegen::render
