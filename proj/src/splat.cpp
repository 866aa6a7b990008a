#include "gsocc/splat.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "gsocc/parallel.hpp"

namespace gsocc {

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidParameter("camera focal lengths must be > 0");
  if (width < 1 || height < 1) throw InvalidParameter("camera resolution must be >= 1x1");
  if (!world_to_camera.allFinite()) throw InvalidParameter("camera pose must be finite");
  const Eigen::Matrix3d R = rotation();
  if (((R * R.transpose()) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9) {
    throw InvalidParameter("camera rotation is not orthonormal");
  }
  if (R.determinant() < 0.0) throw InvalidParameter("camera rotation must have determinant +1");
}

Eigen::Vector3d Camera::ray_direction(double u, double v) const {
  const Eigen::Vector3d local((u - cx) / fx, (v - cy) / fy, 1.0);
  return (rotation().transpose() * local).normalized();
}

Camera Camera::look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up,
                       double fov_x_deg, int width, int height) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  Eigen::Vector3d right = forward.cross(up);
  if (right.norm() < 1e-12) throw InvalidParameter("look_at: up vector is parallel to the view direction");
  right.normalize();
  const Eigen::Vector3d down = forward.cross(right);
  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.fx = 0.5 * width / std::tan(0.5 * fov_x_deg * M_PI / 180.0);
  cam.fy = cam.fx;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  Eigen::Matrix3d R;
  R.row(0) = right.transpose();
  R.row(1) = down.transpose();
  R.row(2) = forward.transpose();
  cam.world_to_camera.setIdentity();
  cam.world_to_camera.topLeftCorner<3, 3>() = R;
  cam.world_to_camera.topRightCorner<3, 1>() = -R * eye;
  return cam;
}

FeatureImage FeatureImage::zeros(int width, int height, int d) {
  FeatureImage img;
  img.width = width;
  img.height = height;
  img.d = d;
  const Eigen::Index n = static_cast<Eigen::Index>(width) * height;
  img.feature = RowMatrixXd::Zero(n, d);
  img.alpha = Eigen::ArrayXd::Zero(n);
  img.depth = Eigen::ArrayXd::Zero(n);
  return img;
}

RenderUpstream RenderUpstream::zeros(int width, int height, int d) {
  RenderUpstream up;
  const Eigen::Index n = static_cast<Eigen::Index>(width) * height;
  up.feature = RowMatrixXd::Zero(n, d);
  up.alpha = Eigen::ArrayXd::Zero(n);
  up.depth = Eigen::ArrayXd::Zero(n);
  return up;
}

namespace {

constexpr double kDepthEps = 1e-8;

// Projection with the intermediates needed by the backward pass.
struct Projection {
  GaussianFrame<double> frame;
  Eigen::Vector3d t;              // camera-frame mean
  Eigen::Matrix<double, 2, 3> J;  // d(pixel)/d(t) at the mean
  Eigen::Matrix3d M;              // W Sigma W^T
  Projected2D screen;
  Eigen::Matrix2d conic;  // inverse of screen.cov2d
};

double largest_eigenvalue(const Eigen::Matrix2d& c) {
  const double mid = 0.5 * (c(0, 0) + c(1, 1));
  const double half_diff = 0.5 * (c(0, 0) - c(1, 1));
  return mid + std::sqrt(half_diff * half_diff + c(0, 1) * c(0, 1));
}

std::optional<Projection> project_full(const Gaussian& g, const Camera& cam, const RenderOptions& opts) {
  Projection p;
  p.frame = make_frame(g);
  const Eigen::Matrix3d W = cam.rotation();
  p.t = W * g.mean + cam.translation();
  const double tz = p.t.z();
  if (tz <= opts.near_plane) return std::nullopt;
  const double inv_z = 1.0 / tz;
  p.J << cam.fx * inv_z, 0.0, -cam.fx * p.t.x() * inv_z * inv_z,  //
      0.0, cam.fy * inv_z, -cam.fy * p.t.y() * inv_z * inv_z;
  p.M = W * p.frame.covariance() * W.transpose();
  Eigen::Matrix2d cov = p.J * p.M * p.J.transpose();
  cov = 0.5 * (cov + cov.transpose());
  cov.diagonal().array() += opts.low_pass;
  p.screen.cov2d = cov;
  p.screen.mean2d = Eigen::Vector2d(cam.fx * p.t.x() * inv_z + cam.cx, cam.fy * p.t.y() * inv_z + cam.cy);
  p.screen.depth = tz;
  p.screen.radius = opts.bbox_sigma * std::sqrt(largest_eigenvalue(cov));
  if (std::isfinite(p.screen.radius)) {
    const auto& m = p.screen.mean2d;
    const double r = p.screen.radius;
    if (m.x() + r < 0.0 || m.x() - r > cam.width || m.y() + r < 0.0 || m.y() - r > cam.height) return std::nullopt;
  }
  p.conic = cov.inverse();
  return p;
}

// Visible Gaussians in blending order plus per-pixel incidence lists.
struct Scene2D {
  std::vector<std::size_t> order;  // rank -> gaussian index
  std::vector<Projection> proj;    // by rank
  std::vector<double> opacity;     // by rank
  std::vector<std::uint64_t> offsets;
  std::vector<std::uint32_t> ranks;

  std::span<const std::uint32_t> at(std::size_t pixel) const {
    return {ranks.data() + offsets[pixel], ranks.data() + offsets[pixel + 1]};
  }
};

Scene2D prepare(std::span<const Gaussian> gaussians, const Camera& cam, Temperature tau, const RenderOptions& opts) {
  cam.validate();
  common_dim(gaussians);
  std::vector<std::optional<Projection>> all(gaussians.size());
  std::vector<std::size_t> visible;
  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    all[i] = project_full(gaussians[i], cam, opts);
    if (all[i]) visible.push_back(i);
  }
  // Front to back by camera-space depth of the mean; ties by content, then index.
  auto key = [&](std::size_t i) {
    const auto& g = gaussians[i];
    return std::make_tuple(all[i]->screen.depth, g.mean.x(), g.mean.y(), g.mean.z(), g.opacity_logit, i);
  };
  std::sort(visible.begin(), visible.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });

  Scene2D s;
  s.order = visible;
  s.proj.reserve(visible.size());
  for (std::size_t i : visible) {
    s.proj.push_back(std::move(*all[i]));
    s.opacity.push_back(tempered_opacity(gaussians[i].opacity_logit, tau));
  }

  const std::size_t pixels = cam.pixel_count();
  auto pixel_range = [&](const Projection& p) {
    std::array<int, 4> r{0, cam.width - 1, 0, cam.height - 1};
    if (std::isfinite(p.screen.radius)) {
      const auto& m = p.screen.mean2d;
      const double rad = p.screen.radius;
      // Pixel centers at integer + 1/2.
      r[0] = std::max(0, static_cast<int>(std::ceil(m.x() - rad - 0.5)));
      r[1] = std::min(cam.width - 1, static_cast<int>(std::floor(m.x() + rad - 0.5)));
      r[2] = std::max(0, static_cast<int>(std::ceil(m.y() - rad - 0.5)));
      r[3] = std::min(cam.height - 1, static_cast<int>(std::floor(m.y() + rad - 0.5)));
    }
    return r;
  };
  s.offsets.assign(pixels + 1, 0);
  std::vector<std::array<int, 4>> ranges;
  ranges.reserve(s.proj.size());
  for (const auto& p : s.proj) {
    ranges.push_back(pixel_range(p));
    const auto& r = ranges.back();
    for (int y = r[2]; y <= r[3]; ++y)
      for (int x = r[0]; x <= r[1]; ++x) ++s.offsets[static_cast<std::size_t>(y) * cam.width + x + 1];
  }
  for (std::size_t k = 0; k < pixels; ++k) s.offsets[k + 1] += s.offsets[k];
  s.ranks.resize(s.offsets[pixels]);
  std::vector<std::uint64_t> cursor(s.offsets.begin(), s.offsets.end() - 1);
  for (std::size_t rank = 0; rank < ranges.size(); ++rank) {
    const auto& r = ranges[rank];
    for (int y = r[2]; y <= r[3]; ++y)
      for (int x = r[0]; x <= r[1]; ++x)
        s.ranks[cursor[static_cast<std::size_t>(y) * cam.width + x]++] = static_cast<std::uint32_t>(rank);
  }
  return s;
}

// One blended contribution at a pixel.
struct Sample {
  std::uint32_t rank;
  double kernel;         // screen-space Gaussian value
  double alpha;          // clamped tempered_opacity * kernel
  bool clamped;          // alpha hit max_alpha
  double transmittance;  // before this sample
};

// Walks the front-to-back list of one pixel; returns the final transmittance.
double composite(const Scene2D& s, std::size_t pixel, const Eigen::Vector2d& px, const RenderOptions& opts,
                 std::vector<Sample>& out) {
  out.clear();
  double T = 1.0;
  for (std::uint32_t rank : s.at(pixel)) {
    const auto& p = s.proj[rank];
    const Eigen::Vector2d delta = px - p.screen.mean2d;
    const double power = -0.5 * delta.dot(p.conic * delta);
    const double G = std::exp(power);
    double a = s.opacity[rank] * G;
    bool clamped = false;
    if (a > opts.max_alpha) {
      a = opts.max_alpha;
      clamped = true;
    }
    out.push_back({rank, G, a, clamped, T});
    T *= 1.0 - a;
    if (T < opts.min_transmittance) break;
  }
  return T;
}

}  // namespace

std::optional<Projected2D> project_gaussian(const Gaussian& g, const Camera& cam, const RenderOptions& opts) {
  cam.validate();
  auto p = project_full(g, cam, opts);
  if (!p) return std::nullopt;
  return p->screen;
}

FeatureImage render_features(std::span<const Gaussian> gaussians, const Camera& cam, Temperature tau,
                             const RenderOptions& opts) {
  const int d = common_dim(gaussians);
  const Scene2D s = prepare(gaussians, cam, tau, opts);
  FeatureImage img = FeatureImage::zeros(cam.width, cam.height, d);
  parallel_for(cam.pixel_count(), [&](int, std::size_t begin, std::size_t end) {
    std::vector<Sample> samples;
    for (std::size_t pix = begin; pix < end; ++pix) {
      const Eigen::Vector2d px(static_cast<double>(pix % cam.width) + 0.5, static_cast<double>(pix / cam.width) + 0.5);
      const double T = composite(s, pix, px, opts, samples);
      double depth = 0.0;
      auto row = img.feature.row(static_cast<Eigen::Index>(pix));
      for (const auto& smp : samples) {
        const double w = smp.transmittance * smp.alpha;
        row += w * gaussians[s.order[smp.rank]].embedding.transpose();
        depth += w * s.proj[smp.rank].screen.depth;
      }
      const double a = 1.0 - T;
      img.alpha[static_cast<Eigen::Index>(pix)] = a;
      img.depth[static_cast<Eigen::Index>(pix)] = depth / std::max(a, kDepthEps);
    }
  });
  return img;
}

std::vector<std::vector<std::pair<std::size_t, double>>> blend_weights(std::span<const Gaussian> gaussians,
                                                                       const Camera& cam, Temperature tau,
                                                                       const RenderOptions& opts) {
  const Scene2D s = prepare(gaussians, cam, tau, opts);
  std::vector<std::vector<std::pair<std::size_t, double>>> out(cam.pixel_count());
  std::vector<Sample> samples;
  for (std::size_t pix = 0; pix < out.size(); ++pix) {
    const Eigen::Vector2d px(static_cast<double>(pix % cam.width) + 0.5, static_cast<double>(pix / cam.width) + 0.5);
    composite(s, pix, px, opts, samples);
    for (const auto& smp : samples) out[pix].emplace_back(s.order[smp.rank], smp.transmittance * smp.alpha);
  }
  return out;
}

namespace {

// Screen-space gradient accumulator for one visible Gaussian.
struct ScreenGrad {
  double opacity = 0.0;
  Eigen::Vector2d mean2d = Eigen::Vector2d::Zero();
  Eigen::Matrix2d conic = Eigen::Matrix2d::Zero();
  double depth = 0.0;
  Eigen::VectorXd embedding;

  ScreenGrad& operator+=(const ScreenGrad& o) {
    opacity += o.opacity;
    mean2d += o.mean2d;
    conic += o.conic;
    depth += o.depth;
    embedding += o.embedding;
    return *this;
  }
};

}  // namespace

GradList render_backward(std::span<const Gaussian> gaussians, const Camera& cam, Temperature tau,
                         const RenderUpstream& upstream, const RenderOptions& opts) {
  const int d = common_dim(gaussians);
  const auto pixels = static_cast<Eigen::Index>(cam.pixel_count());
  if (upstream.feature.rows() != pixels || upstream.feature.cols() != d || upstream.alpha.size() != pixels ||
      upstream.depth.size() != pixels) {
    throw ShapeMismatch("render_backward: upstream shape does not match a " + std::to_string(cam.width) + "x" +
                        std::to_string(cam.height) + "x" + std::to_string(d) + " image");
  }
  GradList grads = zero_grads(gaussians.size(), d);
  const Scene2D s = prepare(gaussians, cam, tau, opts);
  if (s.proj.empty()) return grads;

  const int workers = worker_count(cam.pixel_count());
  ScreenGrad blank;
  blank.embedding = Eigen::VectorXd::Zero(d);
  std::vector<std::vector<ScreenGrad>> partial(workers, std::vector<ScreenGrad>(s.proj.size(), blank));

  parallel_for(cam.pixel_count(), [&](int w, std::size_t begin, std::size_t end) {
    auto& acc = partial[w];
    std::vector<Sample> samples;
    std::vector<double> dL_dw;
    for (std::size_t pix = begin; pix < end; ++pix) {
      const auto P = static_cast<Eigen::Index>(pix);
      const Eigen::RowVectorXd gF = upstream.feature.row(P);
      const double gA = upstream.alpha[P];
      const double gZ = upstream.depth[P];
      if (gA == 0.0 && gZ == 0.0 && gF.isZero(0.0)) continue;
      const Eigen::Vector2d px(static_cast<double>(pix % cam.width) + 0.5, static_cast<double>(pix / cam.width) + 0.5);
      const double T_final = composite(s, pix, px, opts, samples);
      if (samples.empty()) continue;

      const double A = 1.0 - T_final;
      double D = 0.0;
      for (const auto& smp : samples) D += smp.transmittance * smp.alpha * s.proj[smp.rank].screen.depth;
      const double gDnum = gZ / std::max(A, kDepthEps);
      const double gAlpha = gA + (A > kDepthEps ? -gZ * D / (A * A) : 0.0);

      // dL/dw_k for w_k = T_k * alpha_k.
      dL_dw.resize(samples.size());
      for (std::size_t k = 0; k < samples.size(); ++k) {
        const auto& smp = samples[k];
        const auto& f = gaussians[s.order[smp.rank]].embedding;
        dL_dw[k] = gF.dot(f) + gAlpha + gDnum * s.proj[smp.rank].screen.depth;
        const double wk = smp.transmittance * smp.alpha;
        auto& g = acc[smp.rank];
        g.embedding += wk * gF.transpose();
        g.depth += gDnum * wk;
      }
      // Back to front: suffix = sum_{i>k} dL/dw_i * w_i.
      double suffix = 0.0;
      for (std::size_t k = samples.size(); k-- > 0;) {
        const auto& smp = samples[k];
        const double wk = smp.transmittance * smp.alpha;
        const double dL_da = smp.transmittance * dL_dw[k] - suffix / (1.0 - smp.alpha);
        suffix += dL_dw[k] * wk;
        if (smp.clamped) continue;
        auto& g = acc[smp.rank];
        const double op = s.opacity[smp.rank];
        g.opacity += dL_da * smp.kernel;
        const double dL_dG = dL_da * op;
        const auto& p = s.proj[smp.rank];
        const Eigen::Vector2d delta = px - p.screen.mean2d;
        g.mean2d += dL_dG * smp.kernel * (p.conic * delta);
        g.conic += -0.5 * dL_dG * smp.kernel * (delta * delta.transpose());
      }
    }
  });

  const Eigen::Matrix3d W = cam.rotation();
  for (std::size_t rank = 0; rank < s.proj.size(); ++rank) {
    ScreenGrad sg = blank;
    for (int w = 0; w < workers; ++w) sg += partial[w][rank];
    const auto& p = s.proj[rank];
    const std::size_t i = s.order[rank];

    const Eigen::Matrix2d dConic = 0.5 * (sg.conic + sg.conic.transpose());
    const Eigen::Matrix2d dCov = -p.conic * dConic * p.conic;
    const Eigen::Matrix3d dM = p.J.transpose() * dCov * p.J;
    const Eigen::Matrix<double, 2, 3> dJ = 2.0 * dCov * p.J * p.M;
    const Eigen::Matrix3d dSigma = W.transpose() * dM * W;

    const double tx = p.t.x(), ty = p.t.y(), tz = p.t.z();
    const double iz = 1.0 / tz, iz2 = iz * iz, iz3 = iz2 * iz;
    const double fx = cam.fx, fy = cam.fy;
    Eigen::Vector3d dt;
    dt.x() = sg.mean2d.x() * fx * iz + dJ(0, 2) * (-fx * iz2);
    dt.y() = sg.mean2d.y() * fy * iz + dJ(1, 2) * (-fy * iz2);
    dt.z() = sg.mean2d.x() * (-fx * tx * iz2) + sg.mean2d.y() * (-fy * ty * iz2) + dJ(0, 0) * (-fx * iz2) +
             dJ(0, 2) * (2.0 * fx * tx * iz3) + dJ(1, 1) * (-fy * iz2) + dJ(1, 2) * (2.0 * fy * ty * iz3) + sg.depth;

    FrameGrad<double> fg;
    fg.mean = W.transpose() * dt;
    fg.opacity = sg.opacity;
    covariance_backward(p.frame, dSigma, fg);
    fg.finalize_into(gaussians[i], tau, grads[i]);
    grads[i].embedding += sg.embedding;
  }
  return grads;
}

}  // namespace gsocc
