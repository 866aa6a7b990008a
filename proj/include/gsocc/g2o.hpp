#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gsocc/core.hpp"

namespace gsocc {

/// Axis-aligned voxel lattice. Voxel (x, y, z) has center
/// origin + voxel_size * (x + 1/2, y + 1/2, z + 1/2) and flat index (x*Y + y)*Z + z.
struct GridSpec {
  std::array<int, 3> dims{1, 1, 1};
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  double voxel_size = 1.0;

  std::size_t cell_count() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(dims[2]);
  }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(x) * dims[1] + y) * dims[2] + z;
  }
  std::array<int, 3> coords(std::size_t idx) const {
    const int z = static_cast<int>(idx % dims[2]);
    const std::size_t xy = idx / dims[2];
    return {static_cast<int>(xy / dims[1]), static_cast<int>(xy % dims[1]), z};
  }
  Eigen::Vector3d center(int x, int y, int z) const {
    return origin + voxel_size * Eigen::Vector3d(x + 0.5, y + 0.5, z + 0.5);
  }
  Eigen::Vector3d center(std::size_t idx) const {
    const auto c = coords(idx);
    return center(c[0], c[1], c[2]);
  }
  Eigen::Vector3d extent() const { return voxel_size * Eigen::Vector3d(dims[0], dims[1], dims[2]); }

  void validate() const;

  bool operator==(const GridSpec& o) const {
    return dims == o.dims && origin == o.origin && voxel_size == o.voxel_size;
  }
};

/// Scalar payload sampled at voxel centers; length equals spec.cell_count().
struct OccupancyGrid {
  GridSpec spec;
  Eigen::ArrayXd values;

  static OccupancyGrid zeros(const GridSpec& spec) { return {spec, Eigen::ArrayXd::Zero(spec.cell_count())}; }
};

enum class AggregationMode { GF2, Bernoulli, Poisson };

std::string to_string(AggregationMode mode);
AggregationMode parse_aggregation_mode(const std::string& name);

inline constexpr std::size_t kDefaultMaxCells = std::size_t{1} << 28;
inline constexpr double kDefaultOccupancyThreshold = 0.5;

struct VoxelizeOptions {
  KernelOptions kernel{};
  // Average the aggregate over a 2x2x2 sub-lattice of each voxel instead of
  // sampling the center only.
  bool supersample = false;
  // Global multiplier on Poisson intensities (the mean measure).
  double intensity_scale = 1.0;
  std::size_t max_cells = kDefaultMaxCells;
};

namespace detail {

// Aggregates per-primitive contributions v[0..n) at one point and optionally
// writes dP/dv_i into dv. GF2 and Bernoulli share the complementary-product
// rule; they differ only in what the caller passes as v.
template <typename Scalar>
Scalar combine(AggregationMode mode, const Scalar* v, std::size_t n, Scalar intensity_scale, Scalar* dv) {
  if (mode == AggregationMode::Poisson) {
    Scalar z = Scalar(0);
    for (std::size_t i = 0; i < n; ++i) z += v[i];
    z *= intensity_scale;
    if (dv) {
      const Scalar e = std::exp(-z);
      for (std::size_t i = 0; i < n; ++i) dv[i] = intensity_scale * e;
    }
    return -std::expm1(-z);
  }
  Scalar prod = Scalar(1);
  for (std::size_t i = 0; i < n; ++i) prod *= Scalar(1) - v[i];
  if (dv) {
    // Product of the other factors, via an exclusive prefix and suffix pass.
    Scalar prefix = Scalar(1);
    for (std::size_t i = 0; i < n; ++i) {
      dv[i] = prefix;
      prefix *= Scalar(1) - v[i];
    }
    Scalar suffix = Scalar(1);
    for (std::size_t i = n; i-- > 0;) {
      dv[i] *= suffix;
      suffix *= Scalar(1) - v[i];
    }
  }
  return Scalar(1) - prod;
}

}  // namespace detail

/// 1 - prod(1 - p_i(x)); opacity is ignored.
template <typename Scalar>
Scalar aggregate_gf2(std::span<const LEGaussian<Scalar>> gaussians, const Vec3<Scalar>& x, KernelOptions opts = {}) {
  std::vector<Scalar> v;
  v.reserve(gaussians.size());
  for (const auto& g : gaussians) v.push_back(eval_kernel(g, x, opts));
  return detail::combine<Scalar>(AggregationMode::GF2, v.data(), v.size(), Scalar(1), nullptr);
}

/// 1 - prod(1 - h_i(x)) with h_i the tempered effective opacity.
template <typename Scalar>
Scalar aggregate_bernoulli(std::span<const LEGaussian<Scalar>> gaussians, const Vec3<Scalar>& x, Temperature tau,
                           KernelOptions opts = {}) {
  std::vector<Scalar> v;
  v.reserve(gaussians.size());
  for (const auto& g : gaussians) v.push_back(effective_opacity_3d(g, x, tau, opts));
  return detail::combine<Scalar>(AggregationMode::Bernoulli, v.data(), v.size(), Scalar(1), nullptr);
}

template <typename Scalar>
struct PoissonValue {
  Scalar occupancy;     // 1 - exp(-z)
  Scalar mean_measure;  // z
};

/// 1 - exp(-z(x)), z(x) = sum_i h_i(x), accumulated in index order.
template <typename Scalar>
PoissonValue<Scalar> aggregate_poisson(std::span<const LEGaussian<Scalar>> gaussians, const Vec3<Scalar>& x,
                                       Temperature tau, KernelOptions opts = {}, Scalar intensity_scale = Scalar(1)) {
  Scalar z = Scalar(0);
  for (const auto& g : gaussians) z += effective_opacity_3d(g, x, tau, opts);
  z *= intensity_scale;
  return {-std::expm1(-z), z};
}

template <typename Scalar>
Scalar aggregate(AggregationMode mode, std::span<const LEGaussian<Scalar>> gaussians, const Vec3<Scalar>& x,
                 Temperature tau, KernelOptions opts = {}) {
  switch (mode) {
    case AggregationMode::GF2:
      return aggregate_gf2(gaussians, x, opts);
    case AggregationMode::Bernoulli:
      return aggregate_bernoulli(gaussians, x, tau, opts);
    case AggregationMode::Poisson:
      return aggregate_poisson(gaussians, x, tau, opts).occupancy;
  }
  return Scalar(0);
}

/// Sparse voxel -> Gaussian incidence: for every voxel, the ascending list of
/// Gaussians whose truncation box reaches it.
struct VoxelIncidence {
  std::vector<std::uint64_t> offsets;  // cell_count + 1
  std::vector<std::uint32_t> gaussians;

  std::span<const std::uint32_t> at(std::size_t voxel) const {
    return {gaussians.data() + offsets[voxel], gaussians.data() + offsets[voxel + 1]};
  }
};

VoxelIncidence build_incidence(std::span<const GaussianFrame<double>> frames, const GridSpec& spec,
                               double truncation);

/// Sample points used for one voxel: its center, or the 2x2x2 sub-lattice.
std::vector<Eigen::Vector3d> voxel_sample_points(const GridSpec& spec, std::size_t voxel, bool supersample);

/// Evaluates the pointwise aggregate at every voxel.
OccupancyGrid voxelize(std::span<const Gaussian> gaussians, const GridSpec& spec, AggregationMode mode,
                       Temperature tau, const VoxelizeOptions& opts = {});

/// Pulls a per-voxel upstream gradient dL/dP back to the Gaussian parameters.
/// Embedding gradients are always zero.
GradList g2o_backward(std::span<const Gaussian> gaussians, const GridSpec& spec, AggregationMode mode,
                      Temperature tau, const Eigen::ArrayXd& upstream, const VoxelizeOptions& opts = {});

/// 1 where value >= threshold, else 0.
std::vector<std::uint8_t> binarize(const OccupancyGrid& grid, double threshold = kDefaultOccupancyThreshold);

}  // namespace gsocc
