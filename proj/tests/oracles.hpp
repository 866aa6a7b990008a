#pragma once

// Independent reference implementations and helpers shared by the unit tests
// and the acceptance binary. Nothing here calls the library's aggregation,
// kernel or ray-casting code.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "gsocc/core.hpp"
#include "gsocc/g2o.hpp"
#include "gsocc/openvocab.hpp"
#include "gsocc/splat.hpp"

namespace oracle {

using gsocc::Gaussian;

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Eigen::Vector3d uniform3(std::mt19937_64& rng, double lo, double hi) {
  return {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)};
}

inline Eigen::Quaterniond random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q;
}

inline Eigen::VectorXd random_unit(std::mt19937_64& rng, int d) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd v(d);
  for (int k = 0; k < d; ++k) v[k] = n(rng);
  return v.normalized();
}

struct GaussianRanges {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double spread = 1.0;
  double log_scale_lo = std::log(0.3), log_scale_hi = std::log(1.0);
  double logit_lo = -2.0, logit_hi = 2.0;
  int d = 3;
};

inline Gaussian random_gaussian(std::mt19937_64& rng, const GaussianRanges& r = {}) {
  Gaussian g;
  g.mean = r.center + uniform3(rng, -r.spread, r.spread);
  g.rotation = random_rotation(rng);
  g.log_scale = uniform3(rng, r.log_scale_lo, r.log_scale_hi);
  g.opacity_logit = uniform(rng, r.logit_lo, r.logit_hi);
  g.embedding = random_unit(rng, r.d);
  return g;
}

inline std::vector<Gaussian> random_gaussians(std::mt19937_64& rng, int n, const GaussianRanges& r = {}) {
  std::vector<Gaussian> out;
  for (int i = 0; i < n; ++i) out.push_back(random_gaussian(rng, r));
  return out;
}

// Kernel from an explicitly assembled and inverted covariance.
inline double kernel(const Gaussian& g, const Eigen::Vector3d& x) {
  const Eigen::Matrix3d R = g.rotation.normalized().toRotationMatrix();
  const Eigen::Vector3d s2 = (2.0 * g.log_scale).array().exp();
  const Eigen::Matrix3d cov = R * s2.asDiagonal() * R.transpose();
  const Eigen::Vector3d d = x - g.mean;
  return std::exp(-0.5 * d.dot(cov.inverse() * d));
}

inline double opacity(const Gaussian& g, double tau) { return 1.0 / (1.0 + std::exp(-g.opacity_logit / tau)); }

inline double point_gf2(const std::vector<Gaussian>& gs, const Eigen::Vector3d& x) {
  double prod = 1.0;
  for (const auto& g : gs) prod *= 1.0 - kernel(g, x);
  return 1.0 - prod;
}

inline double point_bernoulli(const std::vector<Gaussian>& gs, const Eigen::Vector3d& x, double tau) {
  double prod = 1.0;
  for (const auto& g : gs) prod *= 1.0 - opacity(g, tau) * kernel(g, x);
  return 1.0 - prod;
}

inline double mean_measure(const std::vector<Gaussian>& gs, const Eigen::Vector3d& x, double tau) {
  double z = 0.0;
  for (const auto& g : gs) z += opacity(g, tau) * kernel(g, x);
  return z;
}

inline double point_poisson(const std::vector<Gaussian>& gs, const Eigen::Vector3d& x, double tau) {
  return 1.0 - std::exp(-mean_measure(gs, x, tau));
}

inline Eigen::ArrayXd brute_voxelize(const std::vector<Gaussian>& gs, const gsocc::GridSpec& spec,
                                     gsocc::AggregationMode mode, double tau) {
  Eigen::ArrayXd out(static_cast<Eigen::Index>(spec.cell_count()));
  for (int x = 0; x < spec.dims[0]; ++x)
    for (int y = 0; y < spec.dims[1]; ++y)
      for (int z = 0; z < spec.dims[2]; ++z) {
        const Eigen::Vector3d c = spec.origin + spec.voxel_size * Eigen::Vector3d(x + 0.5, y + 0.5, z + 0.5);
        double v = 0.0;
        switch (mode) {
          case gsocc::AggregationMode::GF2: v = point_gf2(gs, c); break;
          case gsocc::AggregationMode::Bernoulli: v = point_bernoulli(gs, c, tau); break;
          case gsocc::AggregationMode::Poisson: v = point_poisson(gs, c, tau); break;
        }
        out[static_cast<Eigen::Index>((x * spec.dims[1] + y) * spec.dims[2] + z)] = v;
      }
  return out;
}

struct BruteEmbeddings {
  gsocc::RowMatrixXd embedding;
  Eigen::ArrayXd weight;
};

inline BruteEmbeddings brute_voxel_embeddings(const std::vector<Gaussian>& gs, const gsocc::GridSpec& spec,
                                              double tau) {
  const int d = gs.empty() ? 0 : gs.front().dim();
  BruteEmbeddings out{gsocc::RowMatrixXd::Zero(static_cast<Eigen::Index>(spec.cell_count()), d),
                      Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(spec.cell_count()))};
  for (std::size_t c = 0; c < spec.cell_count(); ++c) {
    const Eigen::Vector3d x = spec.center(c);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(d);
    double z = 0.0;
    for (const auto& g : gs) {
      const double h = opacity(g, tau) * kernel(g, x);
      acc += h * g.embedding;
      z += h;
    }
    out.weight[static_cast<Eigen::Index>(c)] = z;
    out.embedding.row(static_cast<Eigen::Index>(c)) = acc.transpose() / std::max(z, 1e-8);
  }
  return out;
}

// First occupied voxel along the ray, by testing every occupied voxel's box
// and keeping the smallest entry parameter.
inline std::optional<std::size_t> brute_first_hit(const gsocc::SemanticGrid& grid, const Eigen::Vector3d& o,
                                                  const Eigen::Vector3d& dir) {
  const auto& spec = grid.spec;
  double best = std::numeric_limits<double>::infinity();
  std::optional<std::size_t> hit;
  for (std::size_t c = 0; c < grid.labels.size(); ++c) {
    if (grid.labels[c] == gsocc::kEmptyLabel) continue;
    const auto ijk = spec.coords(c);
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    bool miss = false;
    for (int a = 0; a < 3; ++a) {
      const double lo = spec.origin[a] + spec.voxel_size * ijk[a];
      const double hi = lo + spec.voxel_size;
      if (dir[a] == 0.0) {
        if (o[a] < lo || o[a] > hi) miss = true;
        continue;
      }
      double ta = (lo - o[a]) / dir[a], tb = (hi - o[a]) / dir[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    if (miss || t0 > t1) continue;
    if (t0 < best) {
      best = t0;
      hit = c;
    }
  }
  return hit;
}

// Central differences of a scalar function of a flat parameter vector.
inline Eigen::VectorXd finite_difference(const std::function<double(const Eigen::VectorXd&)>& f,
                                         const Eigen::VectorXd& x, double h = 1e-4) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double x0 = xp[i];
    xp[i] = x0 + h;
    const double fp = f(xp);
    xp[i] = x0 - h;
    const double fm = f(xp);
    xp[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Norm-wise relative error with a small absolute floor so that groups whose
// true gradient is numerically zero compare on an absolute scale.
inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& n, double floor = 1e-8) {
  return (a - n).norm() / std::max({a.norm(), n.norm(), floor});
}

// Largest relative error over per-Gaussian parameter groups (mean, rotation,
// log_scale, opacity logit, embedding) of packed gradient vectors.
inline double grouped_error(const Eigen::VectorXd& a, const Eigen::VectorXd& n, int d) {
  const int stride = gsocc::kGeometryParams + d;
  const int starts[] = {0, 3, 7, 10, 11};
  const int sizes[] = {3, 4, 3, 1, d};
  double worst = 0.0;
  for (Eigen::Index base = 0; base < a.size(); base += stride) {
    for (int k = 0; k < 5; ++k) {
      if (sizes[k] == 0) continue;
      worst = std::max(worst, relative_error(a.segment(base + starts[k], sizes[k]),
                                             n.segment(base + starts[k], sizes[k])));
    }
  }
  return worst;
}

}  // namespace oracle
