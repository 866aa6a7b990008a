#include "gsocc/g2o.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gsocc/parallel.hpp"

namespace gsocc {

void GridSpec::validate() const {
  for (int d : dims) {
    if (d < 1) throw InvalidParameter("grid dims must each be >= 1");
  }
  if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) throw InvalidParameter("voxel_size must be > 0");
  if (!origin.allFinite()) throw InvalidParameter("grid origin must be finite");
}

std::string to_string(AggregationMode mode) {
  switch (mode) {
    case AggregationMode::GF2:
      return "gf2";
    case AggregationMode::Bernoulli:
      return "bernoulli";
    case AggregationMode::Poisson:
      return "poisson";
  }
  return "?";
}

AggregationMode parse_aggregation_mode(const std::string& name) {
  if (name == "gf2") return AggregationMode::GF2;
  if (name == "bernoulli") return AggregationMode::Bernoulli;
  if (name == "poisson") return AggregationMode::Poisson;
  throw InvalidParameter("unknown aggregation mode '" + name + "' (expected gf2|bernoulli|poisson)");
}

namespace {

struct IndexBox {
  std::array<int, 3> lo, hi;  // inclusive; empty when lo > hi on any axis
};

IndexBox voxel_box(const GaussianFrame<double>& f, const GridSpec& spec, double truncation) {
  IndexBox box;
  if (!std::isfinite(truncation)) {
    box.lo = {0, 0, 0};
    box.hi = {spec.dims[0] - 1, spec.dims[1] - 1, spec.dims[2] - 1};
    return box;
  }
  // Axis-aligned half extent of the truncation ellipsoid: r * sqrt(Sigma_kk).
  const Mat3<double> cov = f.covariance();
  for (int a = 0; a < 3; ++a) {
    const double r = truncation * std::sqrt(cov(a, a));
    // One voxel of slack covers the supersampling sub-lattice.
    const double lo = std::floor((f.mean[a] - r - spec.origin[a]) / spec.voxel_size - 0.5) - 1.0;
    const double hi = std::ceil((f.mean[a] + r - spec.origin[a]) / spec.voxel_size - 0.5) + 1.0;
    box.lo[a] = static_cast<int>(std::clamp(lo, -1.0, static_cast<double>(spec.dims[a])));
    box.hi[a] = static_cast<int>(std::clamp(hi, -1.0, static_cast<double>(spec.dims[a])));
    box.lo[a] = std::max(box.lo[a], 0);
    box.hi[a] = std::min(box.hi[a], spec.dims[a] - 1);
  }
  return box;
}

void check_cells(const GridSpec& spec, std::size_t max_cells) {
  spec.validate();
  const double cells = static_cast<double>(spec.dims[0]) * spec.dims[1] * spec.dims[2];
  if (cells > static_cast<double>(max_cells)) {
    throw ResourceLimit("grid has " + std::to_string(static_cast<unsigned long long>(cells)) +
                        " cells, above the cap of " + std::to_string(max_cells));
  }
}

std::vector<GaussianFrame<double>> make_frames(std::span<const Gaussian> gaussians) {
  std::vector<GaussianFrame<double>> frames;
  frames.reserve(gaussians.size());
  for (const auto& g : gaussians) frames.push_back(make_frame(g));
  return frames;
}

// Contribution of Gaussian i at x: kernel value (GF2) or effective opacity.
struct Contribution {
  const GaussianFrame<double>* frame;
  double kernel;
  double opacity;  // 1 in GF2 mode
};

}  // namespace

VoxelIncidence build_incidence(std::span<const GaussianFrame<double>> frames, const GridSpec& spec,
                               double truncation) {
  const std::size_t cells = spec.cell_count();
  std::vector<IndexBox> boxes;
  boxes.reserve(frames.size());
  for (const auto& f : frames) boxes.push_back(voxel_box(f, spec, truncation));

  VoxelIncidence inc;
  inc.offsets.assign(cells + 1, 0);
  auto for_each_cell = [&](const IndexBox& b, auto&& fn) {
    for (int x = b.lo[0]; x <= b.hi[0]; ++x)
      for (int y = b.lo[1]; y <= b.hi[1]; ++y)
        for (int z = b.lo[2]; z <= b.hi[2]; ++z) fn(spec.index(x, y, z));
  };
  for (const auto& b : boxes) for_each_cell(b, [&](std::size_t c) { ++inc.offsets[c + 1]; });
  for (std::size_t c = 0; c < cells; ++c) inc.offsets[c + 1] += inc.offsets[c];
  inc.gaussians.resize(inc.offsets[cells]);
  std::vector<std::uint64_t> cursor(inc.offsets.begin(), inc.offsets.end() - 1);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    for_each_cell(boxes[i], [&](std::size_t c) { inc.gaussians[cursor[c]++] = static_cast<std::uint32_t>(i); });
  }
  return inc;
}

std::vector<Eigen::Vector3d> voxel_sample_points(const GridSpec& spec, std::size_t voxel, bool supersample) {
  const Eigen::Vector3d c = spec.center(voxel);
  if (!supersample) return {c};
  std::vector<Eigen::Vector3d> pts;
  pts.reserve(8);
  const double q = 0.25 * spec.voxel_size;
  for (int dx : {-1, 1})
    for (int dy : {-1, 1})
      for (int dz : {-1, 1}) pts.push_back(c + q * Eigen::Vector3d(dx, dy, dz));
  return pts;
}

OccupancyGrid voxelize(std::span<const Gaussian> gaussians, const GridSpec& spec, AggregationMode mode,
                       Temperature tau, const VoxelizeOptions& opts) {
  check_cells(spec, opts.max_cells);
  const auto frames = make_frames(gaussians);
  std::vector<double> opacity(gaussians.size(), 1.0);
  if (mode != AggregationMode::GF2) {
    for (std::size_t i = 0; i < gaussians.size(); ++i) opacity[i] = tempered_opacity(gaussians[i].opacity_logit, tau);
  }
  const auto inc = build_incidence(frames, spec, opts.kernel.truncation);

  OccupancyGrid out = OccupancyGrid::zeros(spec);
  parallel_for(spec.cell_count(), [&](int, std::size_t begin, std::size_t end) {
    std::vector<double> v;
    for (std::size_t c = begin; c < end; ++c) {
      const auto list = inc.at(c);
      if (list.empty()) continue;
      const auto pts = voxel_sample_points(spec, c, opts.supersample);
      double acc = 0.0;
      for (const auto& x : pts) {
        v.clear();
        for (std::uint32_t i : list) v.push_back(opacity[i] * eval_kernel(frames[i], x, opts.kernel));
        acc += detail::combine<double>(mode, v.data(), v.size(), opts.intensity_scale, nullptr);
      }
      out.values[static_cast<Eigen::Index>(c)] = acc / static_cast<double>(pts.size());
    }
  });
  return out;
}

GradList g2o_backward(std::span<const Gaussian> gaussians, const GridSpec& spec, AggregationMode mode,
                      Temperature tau, const Eigen::ArrayXd& upstream, const VoxelizeOptions& opts) {
  check_cells(spec, opts.max_cells);
  if (static_cast<std::size_t>(upstream.size()) != spec.cell_count()) {
    throw ShapeMismatch("g2o_backward: upstream has " + std::to_string(upstream.size()) + " cells, grid has " +
                        std::to_string(spec.cell_count()));
  }
  const int d = common_dim(gaussians);
  GradList grads = zero_grads(gaussians.size(), d);
  if (gaussians.empty()) return grads;

  const auto frames = make_frames(gaussians);
  std::vector<double> opacity(gaussians.size(), 1.0);
  if (mode != AggregationMode::GF2) {
    for (std::size_t i = 0; i < gaussians.size(); ++i) opacity[i] = tempered_opacity(gaussians[i].opacity_logit, tau);
  }
  const auto inc = build_incidence(frames, spec, opts.kernel.truncation);

  const std::size_t cells = spec.cell_count();
  const int workers = worker_count(cells);
  std::vector<std::vector<FrameGrad<double>>> partial(workers, std::vector<FrameGrad<double>>(gaussians.size()));
  parallel_for(cells, [&](int w, std::size_t begin, std::size_t end) {
    auto& acc = partial[w];
    std::vector<double> kern, v, dv;
    for (std::size_t c = begin; c < end; ++c) {
      const double up = upstream[static_cast<Eigen::Index>(c)];
      const auto list = inc.at(c);
      if (up == 0.0 || list.empty()) continue;
      const auto pts = voxel_sample_points(spec, c, opts.supersample);
      const double weight = up / static_cast<double>(pts.size());
      for (const auto& x : pts) {
        kern.clear();
        v.clear();
        for (std::uint32_t i : list) {
          kern.push_back(eval_kernel(frames[i], x, opts.kernel));
          v.push_back(opacity[i] * kern.back());
        }
        dv.resize(v.size());
        detail::combine<double>(mode, v.data(), v.size(), opts.intensity_scale, dv.data());
        for (std::size_t k = 0; k < list.size(); ++k) {
          const std::uint32_t i = list[k];
          const double dL_dv = weight * dv[k];
          kernel_backward(frames[i], x, kern[k], dL_dv * opacity[i], acc[i]);
          if (mode != AggregationMode::GF2) acc[i].opacity += dL_dv * kern[k];
        }
      }
    }
  });

  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    FrameGrad<double> total;
    for (int w = 0; w < workers; ++w) total += partial[w][i];
    total.finalize_into(gaussians[i], tau, grads[i]);
  }
  return grads;
}

std::vector<std::uint8_t> binarize(const OccupancyGrid& grid, double threshold) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(grid.values.size()));
  for (Eigen::Index i = 0; i < grid.values.size(); ++i) out[i] = grid.values[i] >= threshold ? 1 : 0;
  return out;
}

}  // namespace gsocc
