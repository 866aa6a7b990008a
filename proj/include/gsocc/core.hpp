#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "gsocc/errors.hpp"

namespace gsocc {

template <typename Scalar>
using Vec2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Vec4 = Eigen::Matrix<Scalar, 4, 1>;
template <typename Scalar>
using Mat2 = Eigen::Matrix<Scalar, 2, 2>;
template <typename Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline constexpr double kMinScale = 1e-6;
inline constexpr double kMaxScale = 1e3;
inline constexpr double kMinTau = 1e-6;
inline constexpr double kMaxTau = 1e3;
inline constexpr double kSingularVariance = 1e-12;
inline constexpr double kDefaultTruncation = 6.0;
inline constexpr double kNoTruncation = std::numeric_limits<double>::infinity();

// Number of scalar parameters per Gaussian excluding the embedding:
// mean(3) + rotation(4, w x y z) + log_scale(3) + opacity_logit(1).
inline constexpr int kGeometryParams = 11;

// Rounds to the nearest float. The volatile store keeps GCC's SLP vectorizer
// from folding the double -> float -> double round trip away.
inline double round_to_float(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}

/// Sharpening temperature for the tempered sigmoid. Always within [1e-6, 1e3].
class Temperature {
 public:
  constexpr Temperature() = default;
  explicit Temperature(double tau) {
    if (!std::isfinite(tau) || tau <= 0.0) throw InvalidParameter("temperature must be finite and > 0");
    tau_ = std::clamp(tau, kMinTau, kMaxTau);
  }
  constexpr double value() const noexcept { return tau_; }

 private:
  double tau_ = 1.0;
};

/// One language-embedded Gaussian primitive. Covariance is kept factored as
/// rotation * diag(exp(log_scale))^2 * rotation^T and opacity as a logit.
template <typename Scalar>
struct LEGaussian {
  Vec3<Scalar> mean = Vec3<Scalar>::Zero();
  Eigen::Quaternion<Scalar> rotation = Eigen::Quaternion<Scalar>::Identity();
  Vec3<Scalar> log_scale = Vec3<Scalar>::Zero();
  Scalar opacity_logit = Scalar(0);
  VecX<Scalar> embedding;

  int dim() const { return static_cast<int>(embedding.size()); }

  // Projects the primitive back onto its valid set: unit quaternion and
  // per-axis scale within [kMinScale, kMaxScale].
  void sanitize() {
    const Scalar n = rotation.norm();
    if (!(n > Scalar(0)) || !std::isfinite(static_cast<double>(n))) {
      throw InvalidParameter("rotation quaternion has zero or non-finite norm");
    }
    rotation.coeffs() /= n;
    const Scalar lo = Scalar(std::log(kMinScale));
    const Scalar hi = Scalar(std::log(kMaxScale));
    log_scale = log_scale.cwiseMax(lo).cwiseMin(hi);
  }

  template <typename Other>
  LEGaussian<Other> cast() const {
    LEGaussian<Other> out;
    out.mean = mean.template cast<Other>();
    out.rotation = rotation.template cast<Other>();
    out.log_scale = log_scale.template cast<Other>();
    out.opacity_logit = static_cast<Other>(opacity_logit);
    out.embedding = embedding.template cast<Other>();
    return out;
  }

  bool operator==(const LEGaussian& o) const {
    return mean == o.mean && rotation.coeffs() == o.rotation.coeffs() && log_scale == o.log_scale &&
           opacity_logit == o.opacity_logit && embedding == o.embedding;
  }
};

using Gaussian = LEGaussian<double>;

/// Gradient with the same layout as LEGaussian. The rotation entry is with
/// respect to the raw (w, x, y, z) quaternion components.
template <typename Scalar>
struct GaussianGrad {
  Vec3<Scalar> mean = Vec3<Scalar>::Zero();
  Vec4<Scalar> rotation = Vec4<Scalar>::Zero();
  Vec3<Scalar> log_scale = Vec3<Scalar>::Zero();
  Scalar opacity_logit = Scalar(0);
  VecX<Scalar> embedding;

  static GaussianGrad zero(int d) {
    GaussianGrad g;
    g.embedding = VecX<Scalar>::Zero(d);
    return g;
  }

  GaussianGrad& operator+=(const GaussianGrad& o) {
    mean += o.mean;
    rotation += o.rotation;
    log_scale += o.log_scale;
    opacity_logit += o.opacity_logit;
    embedding += o.embedding;
    return *this;
  }

  GaussianGrad& operator*=(Scalar s) {
    mean *= s;
    rotation *= s;
    log_scale *= s;
    opacity_logit *= s;
    embedding *= s;
    return *this;
  }
};

using GradList = std::vector<GaussianGrad<double>>;

inline GradList zero_grads(std::size_t n, int d) { return GradList(n, GaussianGrad<double>::zero(d)); }

struct KernelOptions {
  // Kernel is treated as exactly zero beyond this Mahalanobis distance.
  double truncation = kDefaultTruncation;
};

inline constexpr KernelOptions kExactKernel{kNoTruncation};

// Rotation matrix of a quaternion after normalization.
template <typename Scalar>
Mat3<Scalar> rotation_matrix(const Eigen::Quaternion<Scalar>& q) {
  const Scalar n = q.norm();
  if (!(n > Scalar(0)) || !std::isfinite(static_cast<double>(n))) {
    throw InvalidParameter("rotation quaternion has zero or non-finite norm");
  }
  return Eigen::Quaternion<Scalar>(q.coeffs() / n).toRotationMatrix();
}

/// Pulls a gradient with respect to the rotation matrix back onto the raw
/// (w, x, y, z) quaternion, including the normalization step.
template <typename Scalar>
Vec4<Scalar> rotation_backward(const Eigen::Quaternion<Scalar>& q_raw, const Mat3<Scalar>& dR) {
  const Scalar n = q_raw.norm();
  const Scalar w = q_raw.w() / n, x = q_raw.x() / n, y = q_raw.y() / n, z = q_raw.z() / n;
  const auto& G = dR;
  Vec4<Scalar> du;
  du[0] = Scalar(2) * (-z * G(0, 1) + y * G(0, 2) + z * G(1, 0) - x * G(1, 2) - y * G(2, 0) + x * G(2, 1));
  du[1] = Scalar(2) * (y * G(0, 1) + z * G(0, 2) + y * G(1, 0) - Scalar(2) * x * G(1, 1) - w * G(1, 2) +
                       z * G(2, 0) + w * G(2, 1) - Scalar(2) * x * G(2, 2));
  du[2] = Scalar(2) * (-Scalar(2) * y * G(0, 0) + x * G(0, 1) + w * G(0, 2) + x * G(1, 0) + z * G(1, 2) -
                       w * G(2, 0) + z * G(2, 1) - Scalar(2) * y * G(2, 2));
  du[3] = Scalar(2) * (-Scalar(2) * z * G(0, 0) - w * G(0, 1) + x * G(0, 2) + w * G(1, 0) -
                       Scalar(2) * z * G(1, 1) + y * G(1, 2) + x * G(2, 0) + y * G(2, 1));
  const Vec4<Scalar> u(w, x, y, z);
  return (du - u * u.dot(du)) / n;
}

/// Sigma = R diag(exp(2 log_scale)) R^T.
template <typename Scalar>
Mat3<Scalar> build_covariance(const Eigen::Quaternion<Scalar>& rotation, const Vec3<Scalar>& log_scale) {
  if (!rotation.coeffs().allFinite() || !log_scale.allFinite()) {
    throw InvalidParameter("build_covariance: non-finite rotation or log_scale");
  }
  const Mat3<Scalar> R = rotation_matrix(rotation);
  const Vec3<Scalar> var = (Scalar(2) * log_scale).array().exp().matrix();
  Mat3<Scalar> cov = R * var.asDiagonal() * R.transpose();
  return Scalar(0.5) * (cov + cov.transpose());
}

/// Per-Gaussian quantities reused across many evaluation points.
template <typename Scalar>
struct GaussianFrame {
  Vec3<Scalar> mean;
  Mat3<Scalar> R;
  Vec3<Scalar> variance;
  Vec3<Scalar> inv_variance;

  Mat3<Scalar> covariance() const { return R * variance.asDiagonal() * R.transpose(); }
  Mat3<Scalar> precision() const { return R * inv_variance.asDiagonal() * R.transpose(); }
  Scalar max_std() const { return std::sqrt(variance.maxCoeff()); }

  // Squared Mahalanobis distance of x.
  Scalar mahalanobis_sq(const Vec3<Scalar>& x) const {
    const Vec3<Scalar> local = R.transpose() * (x - mean);
    return (local.array().square() * inv_variance.array()).sum();
  }
};

template <typename Scalar>
GaussianFrame<Scalar> make_frame(const LEGaussian<Scalar>& g) {
  if (!g.mean.allFinite() || !g.rotation.coeffs().allFinite() || !g.log_scale.allFinite()) {
    throw InvalidParameter("Gaussian has non-finite geometry");
  }
  if (static_cast<double>(Scalar(2) * g.log_scale.minCoeff()) < std::log(kSingularVariance) - 1e-9) {
    throw NumericalDegeneracy("Gaussian covariance is singular (smallest eigenvalue < 1e-12)");
  }
  GaussianFrame<Scalar> f;
  f.mean = g.mean;
  f.R = rotation_matrix(g.rotation);
  f.variance = (Scalar(2) * g.log_scale).array().exp().matrix();
  f.inv_variance = (Scalar(-2) * g.log_scale).array().exp().matrix();
  return f;
}

/// exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)), zero beyond the truncation radius.
template <typename Scalar>
Scalar eval_kernel(const GaussianFrame<Scalar>& f, const Vec3<Scalar>& x, KernelOptions opts = {}) {
  const Scalar m = f.mahalanobis_sq(x);
  if (static_cast<double>(m) > opts.truncation * opts.truncation) return Scalar(0);
  return std::exp(Scalar(-0.5) * m);
}

template <typename Scalar>
Scalar eval_kernel(const LEGaussian<Scalar>& g, const Vec3<Scalar>& x, KernelOptions opts = {}) {
  return eval_kernel(make_frame(g), x, opts);
}

/// Overflow-free logistic function.
template <typename Scalar>
Scalar sigmoid(Scalar t) {
  if (t >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-t));
  const Scalar e = std::exp(t);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar tempered_opacity(Scalar opacity_logit, Temperature tau) {
  return sigmoid(opacity_logit / Scalar(tau.value()));
}

// d tempered_opacity / d logit.
template <typename Scalar>
Scalar tempered_opacity_grad(Scalar opacity_logit, Temperature tau) {
  const Scalar a = tempered_opacity(opacity_logit, tau);
  return a * (Scalar(1) - a) / Scalar(tau.value());
}

/// h(x) = sigmoid(logit / tau) * kernel(x).
template <typename Scalar>
Scalar effective_opacity_3d(const LEGaussian<Scalar>& g, const Vec3<Scalar>& x, Temperature tau,
                            KernelOptions opts = {}) {
  return tempered_opacity(g.opacity_logit, tau) * eval_kernel(g, x, opts);
}

/// Gradient accumulator in frame coordinates; finalize() converts the
/// rotation-matrix gradient to quaternion components once per Gaussian.
template <typename Scalar>
struct FrameGrad {
  Vec3<Scalar> mean = Vec3<Scalar>::Zero();
  Mat3<Scalar> R = Mat3<Scalar>::Zero();
  Vec3<Scalar> log_scale = Vec3<Scalar>::Zero();
  Scalar opacity = Scalar(0);  // d/d(tempered opacity), not the logit

  FrameGrad& operator+=(const FrameGrad& o) {
    mean += o.mean;
    R += o.R;
    log_scale += o.log_scale;
    opacity += o.opacity;
    return *this;
  }

  void finalize_into(const LEGaussian<Scalar>& g, Temperature tau, GaussianGrad<Scalar>& out) const {
    out.mean += mean;
    out.rotation += rotation_backward(g.rotation, R);
    out.log_scale += log_scale;
    out.opacity_logit += opacity * tempered_opacity_grad(g.opacity_logit, tau);
  }
};

/// Accumulates dL/dp * dp/dtheta for p = eval_kernel(f, x) with value `p`.
template <typename Scalar>
void kernel_backward(const GaussianFrame<Scalar>& f, const Vec3<Scalar>& x, Scalar p, Scalar dL_dp,
                     FrameGrad<Scalar>& grad) {
  if (p == Scalar(0) || dL_dp == Scalar(0)) return;
  const Scalar dL_dm = Scalar(-0.5) * p * dL_dp;
  const Vec3<Scalar> d = x - f.mean;
  const Vec3<Scalar> local = f.R.transpose() * d;
  const Vec3<Scalar> wl = local.cwiseProduct(f.inv_variance);
  grad.mean += dL_dm * Scalar(-2) * (f.R * wl);
  grad.R += dL_dm * Scalar(2) * d * wl.transpose();
  grad.log_scale += dL_dm * Scalar(-2) * local.cwiseProduct(wl);
}

/// Accumulates the pullback of dL/dSigma through Sigma = R diag(var) R^T.
template <typename Scalar>
void covariance_backward(const GaussianFrame<Scalar>& f, const Mat3<Scalar>& dL_dSigma, FrameGrad<Scalar>& grad) {
  const Mat3<Scalar> sym = dL_dSigma + dL_dSigma.transpose();
  for (int k = 0; k < 3; ++k) {
    const Vec3<Scalar> r = f.R.col(k);
    grad.R.col(k) += f.variance[k] * (sym * r);
    grad.log_scale[k] += f.variance[k] * r.dot(sym * r);
  }
}

/// Flattened parameter vector in file/record order: mean, rotation (w x y z),
/// log_scale, opacity_logit, embedding.
template <typename Scalar>
VecX<Scalar> pack_parameters(std::span<const LEGaussian<Scalar>> gs) {
  if (gs.empty()) return {};
  const int d = gs.front().dim();
  const int stride = kGeometryParams + d;
  VecX<Scalar> out(static_cast<Eigen::Index>(gs.size()) * stride);
  for (std::size_t i = 0; i < gs.size(); ++i) {
    auto seg = out.segment(static_cast<Eigen::Index>(i) * stride, stride);
    const auto& g = gs[i];
    seg.template head<3>() = g.mean;
    seg.template segment<4>(3) << g.rotation.w(), g.rotation.x(), g.rotation.y(), g.rotation.z();
    seg.template segment<3>(7) = g.log_scale;
    seg[10] = g.opacity_logit;
    seg.tail(d) = g.embedding;
  }
  return out;
}

template <typename Scalar>
void unpack_parameters(const VecX<Scalar>& flat, std::span<LEGaussian<Scalar>> gs) {
  if (gs.empty()) return;
  const int d = gs.front().dim();
  const int stride = kGeometryParams + d;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    auto seg = flat.segment(static_cast<Eigen::Index>(i) * stride, stride);
    auto& g = gs[i];
    g.mean = seg.template head<3>();
    g.rotation = Eigen::Quaternion<Scalar>(seg[3], seg[4], seg[5], seg[6]);
    g.log_scale = seg.template segment<3>(7);
    g.opacity_logit = seg[10];
    g.embedding = seg.tail(d);
  }
}

template <typename Scalar>
VecX<Scalar> pack_gradients(std::span<const GaussianGrad<Scalar>> gs) {
  if (gs.empty()) return {};
  const int d = static_cast<int>(gs.front().embedding.size());
  const int stride = kGeometryParams + d;
  VecX<Scalar> out(static_cast<Eigen::Index>(gs.size()) * stride);
  for (std::size_t i = 0; i < gs.size(); ++i) {
    auto seg = out.segment(static_cast<Eigen::Index>(i) * stride, stride);
    seg.template head<3>() = gs[i].mean;
    seg.template segment<4>(3) = gs[i].rotation;
    seg.template segment<3>(7) = gs[i].log_scale;
    seg[10] = gs[i].opacity_logit;
    seg.tail(d) = gs[i].embedding;
  }
  return out;
}

// All Gaussians in a set must share one embedding dimension.
inline int common_dim(std::span<const Gaussian> gs) {
  if (gs.empty()) return 0;
  const int d = gs.front().dim();
  for (const auto& g : gs) {
    if (g.dim() != d) throw InvalidParameter("Gaussian set has mixed embedding dimensions");
  }
  return d;
}

}  // namespace gsocc
