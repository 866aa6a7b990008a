#pragma once

#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gsocc/core.hpp"

namespace gsocc {

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Pinhole camera. world_to_camera maps world points into a frame with +z
/// forward, +x right, +y down. Pixel (u, v) covers [u, u+1) x [v, v+1).
struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  int width = 1, height = 1;
  Eigen::Matrix4d world_to_camera = Eigen::Matrix4d::Identity();

  Eigen::Matrix3d rotation() const { return world_to_camera.topLeftCorner<3, 3>(); }
  Eigen::Vector3d translation() const { return world_to_camera.topRightCorner<3, 1>(); }
  Eigen::Vector3d center() const { return -rotation().transpose() * translation(); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }

  void validate() const;

  // World-space direction of the ray through continuous pixel coordinate (u, v).
  Eigen::Vector3d ray_direction(double u, double v) const;

  static Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up,
                        double fov_x_deg, int width, int height);

  bool operator==(const Camera& o) const {
    return fx == o.fx && fy == o.fy && cx == o.cx && cy == o.cy && width == o.width && height == o.height &&
           world_to_camera == o.world_to_camera;
  }
};

struct Projected2D {
  Eigen::Vector2d mean2d;
  Eigen::Matrix2d cov2d;  // includes the low-pass term
  double depth;           // camera-frame z
  double radius;          // bbox half-size in pixels (bbox_sigma * largest std)
};

struct RenderOptions {
  double near_plane = 0.01;
  double low_pass = 0.3;
  // Screen-space support of each Gaussian, in standard deviations.
  double bbox_sigma = 3.0;
  // Blending along a pixel stops once transmittance drops below this.
  double min_transmittance = 1e-4;
  double max_alpha = 0.999;
};

inline constexpr RenderOptions kExactRender{0.01, 0.3, std::numeric_limits<double>::infinity(), 0.0, 0.999};

std::optional<Projected2D> project_gaussian(const Gaussian& g, const Camera& cam, const RenderOptions& opts = {});

/// Rendered embedding map; feature holds one row per pixel (index y*W + x).
struct FeatureImage {
  int width = 0, height = 0, d = 0;
  RowMatrixXd feature;
  Eigen::ArrayXd alpha;
  Eigen::ArrayXd depth;

  static FeatureImage zeros(int width, int height, int d);
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
};

FeatureImage render_features(std::span<const Gaussian> gaussians, const Camera& cam, Temperature tau,
                             const RenderOptions& opts = {});

struct RenderUpstream {
  RowMatrixXd feature;
  Eigen::ArrayXd alpha;
  Eigen::ArrayXd depth;

  static RenderUpstream zeros(int width, int height, int d);
};

GradList render_backward(std::span<const Gaussian> gaussians, const Camera& cam, Temperature tau,
                         const RenderUpstream& upstream, const RenderOptions& opts = {});

/// Per-pixel (gaussian index, blend weight T_i * alpha_i) in blending order.
std::vector<std::vector<std::pair<std::size_t, double>>> blend_weights(std::span<const Gaussian> gaussians,
                                                                       const Camera& cam, Temperature tau,
                                                                       const RenderOptions& opts = {});

}  // namespace gsocc
