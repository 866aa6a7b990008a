#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "gsocc/g2o.hpp"
#include "gsocc/parallel.hpp"
#include "oracles.hpp"

using namespace gsocc;

namespace {

Gaussian at(const Eigen::Vector3d& mean, double logit = 0.0, double scale = 1.0) {
  Gaussian g;
  g.mean = mean;
  g.log_scale = Eigen::Vector3d::Constant(std::log(scale));
  g.opacity_logit = logit;
  g.embedding = Eigen::VectorXd::Zero(2);
  return g;
}

// A Gaussian whose kernel at the origin equals p.
Gaussian with_kernel_at_origin(double p, double logit = 0.0) {
  return at(Eigen::Vector3d(std::sqrt(-2.0 * std::log(p)), 0, 0), logit);
}

GridSpec cube(int n, double vs, double lo) {
  GridSpec s;
  s.dims = {n, n, n};
  s.origin = Eigen::Vector3d::Constant(lo);
  s.voxel_size = vs;
  return s;
}

const Eigen::Vector3d kOrigin = Eigen::Vector3d::Zero();
const std::vector<Gaussian> kNone;

}  // namespace

TEST(GridSpec, CenterAndIndexConvention) {
  GridSpec s;
  s.dims = {2, 3, 4};
  s.origin = Eigen::Vector3d(1, 2, 3);
  s.voxel_size = 0.5;
  EXPECT_EQ(s.cell_count(), 24u);
  EXPECT_EQ(s.index(1, 2, 3), static_cast<std::size_t>((1 * 3 + 2) * 4 + 3));
  EXPECT_TRUE(s.center(1, 2, 3).isApprox(Eigen::Vector3d(1.75, 3.25, 4.75)));
  for (std::size_t i = 0; i < s.cell_count(); ++i) {
    const auto c = s.coords(i);
    EXPECT_EQ(s.index(c[0], c[1], c[2]), i);
  }
  GridSpec bad = s;
  bad.dims[1] = 0;
  EXPECT_THROW(bad.validate(), InvalidParameter);
  bad = s;
  bad.voxel_size = -1;
  EXPECT_THROW(bad.validate(), InvalidParameter);
}

TEST(AggregationMode, ParsesNames) {
  EXPECT_EQ(parse_aggregation_mode("gf2"), AggregationMode::GF2);
  EXPECT_EQ(parse_aggregation_mode("bernoulli"), AggregationMode::Bernoulli);
  EXPECT_EQ(parse_aggregation_mode("poisson"), AggregationMode::Poisson);
  EXPECT_EQ(to_string(AggregationMode::Poisson), "poisson");
  EXPECT_THROW(parse_aggregation_mode("max"), InvalidParameter);
}

TEST(AggregateGF2, Examples) {
  EXPECT_EQ(aggregate_gf2<double>(kNone, kOrigin), 0.0);
  const std::vector<Gaussian> transparent{at(kOrigin, -40.0), at(Eigen::Vector3d(1, 0, 0), -40.0)};
  EXPECT_EQ(aggregate_gf2<double>(transparent, kOrigin), 1.0);
  const std::vector<Gaussian> halves{with_kernel_at_origin(0.5), with_kernel_at_origin(0.5)};
  EXPECT_NEAR(aggregate_gf2<double>(halves, kOrigin), 0.75, 1e-12);
}

TEST(AggregateBernoulli, Examples) {
  const Temperature tau(1.0);
  EXPECT_EQ(aggregate_bernoulli<double>(kNone, kOrigin, tau), 0.0);
  const std::vector<Gaussian> one{at(kOrigin)};  // h = 0.5 * 1
  EXPECT_EQ(aggregate_bernoulli<double>(one, kOrigin, tau), 0.5);
  const std::vector<Gaussian> two{at(kOrigin), at(kOrigin)};
  EXPECT_EQ(aggregate_bernoulli<double>(two, kOrigin, tau), 0.75);
}

TEST(AggregatePoisson, Examples) {
  const Temperature tau(1.0);
  const auto empty = aggregate_poisson<double>(kNone, kOrigin, tau);
  EXPECT_EQ(empty.occupancy, 0.0);
  EXPECT_EQ(empty.mean_measure, 0.0);
  const std::vector<Gaussian> unit{at(kOrigin, 40.0)};  // h = 1
  EXPECT_NEAR(aggregate_poisson<double>(unit, kOrigin, tau).occupancy, 1.0 - std::exp(-1.0), 1e-15);
  EXPECT_NEAR(aggregate_poisson<double>(unit, kOrigin, tau).occupancy, 0.63212, 1e-5);
  const std::vector<Gaussian> halves{at(kOrigin), at(kOrigin)};
  const auto p = aggregate_poisson<double>(halves, kOrigin, tau);
  EXPECT_NEAR(p.occupancy, 1.0 - std::exp(-1.0), 1e-15);
  EXPECT_EQ(p.mean_measure, 1.0);
}

TEST(Aggregates, OrderingAndGapBound) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 1000; ++t) {
    oracle::GaussianRanges r;
    r.logit_lo = -5.0;
    r.logit_hi = 5.0;
    const auto gs = oracle::random_gaussians(rng, std::uniform_int_distribution<int>(1, 6)(rng), r);
    const Eigen::Vector3d x = oracle::uniform3(rng, -1.0, 1.0);
    const Temperature tau(std::pow(10.0, oracle::uniform(rng, -3.0, 1.0)));
    const double g = aggregate_gf2<double>(gs, x);
    const double b = aggregate_bernoulli<double>(gs, x, tau);
    const auto p = aggregate_poisson<double>(gs, x, tau);
    EXPECT_LE(p.occupancy, b + 1e-12);
    EXPECT_LE(b, g + 1e-12);
    EXPECT_GE(b - p.occupancy, -1e-12);
    EXPECT_LE(b - p.occupancy, 0.5 * p.mean_measure * p.mean_measure + 1e-12);
  }
}

TEST(Aggregates, PermutationInvariance) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 200; ++t) {
    auto gs = oracle::random_gaussians(rng, 6);
    const Eigen::Vector3d x = oracle::uniform3(rng, -1.0, 1.0);
    const Temperature tau(oracle::uniform(rng, 0.01, 2.0));
    auto perm = gs;
    std::shuffle(perm.begin(), perm.end(), rng);
    for (auto mode : {AggregationMode::GF2, AggregationMode::Bernoulli, AggregationMode::Poisson}) {
      EXPECT_NEAR(aggregate<double>(mode, gs, x, tau), aggregate<double>(mode, perm, x, tau), 1e-12);
    }
  }
}

TEST(Aggregates, AddingAGaussianNeverDecreases) {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 200; ++t) {
    auto gs = oracle::random_gaussians(rng, 4);
    const Eigen::Vector3d x = oracle::uniform3(rng, -1.0, 1.0);
    const Temperature tau(oracle::uniform(rng, 0.01, 2.0));
    auto more = gs;
    more.push_back(oracle::random_gaussian(rng));
    for (auto mode : {AggregationMode::GF2, AggregationMode::Bernoulli, AggregationMode::Poisson}) {
      EXPECT_GE(aggregate<double>(mode, more, x, tau), aggregate<double>(mode, gs, x, tau));
    }
  }
}

TEST(Aggregates, PoissonMeanMeasuresAdd) {
  std::mt19937_64 rng(14);
  for (int t = 0; t < 200; ++t) {
    const auto a = oracle::random_gaussians(rng, 3);
    const auto b = oracle::random_gaussians(rng, 2);
    auto ab = a;
    ab.insert(ab.end(), b.begin(), b.end());
    const Eigen::Vector3d x = oracle::uniform3(rng, -1.0, 1.0);
    const Temperature tau(oracle::uniform(rng, 0.01, 2.0));
    const double pa = aggregate_poisson<double>(a, x, tau).occupancy;
    const double pb = aggregate_poisson<double>(b, x, tau).occupancy;
    EXPECT_NEAR(aggregate_poisson<double>(ab, x, tau).occupancy, 1.0 - (1.0 - pa) * (1.0 - pb), 1e-12);
  }
}

TEST(Aggregates, GF2IgnoresOpacityAndTemperature) {
  std::mt19937_64 rng(15);
  auto gs = oracle::random_gaussians(rng, 4);
  const Eigen::Vector3d x(0.1, 0.2, 0.3);
  const double v = aggregate<double>(AggregationMode::GF2, gs, x, Temperature(0.01));
  for (auto& g : gs) g.opacity_logit = -g.opacity_logit + 3.0;
  EXPECT_EQ(aggregate<double>(AggregationMode::GF2, gs, x, Temperature(5.0)), v);
}

TEST(Voxelize, EmptyListGivesZeros) {
  const auto grid = voxelize(kNone, cube(4, 0.5, -1.0), AggregationMode::Poisson, Temperature(1.0));
  EXPECT_EQ(grid.values.size(), 64);
  EXPECT_TRUE((grid.values == 0.0).all());
}

TEST(Voxelize, PeakAtCenterVoxel) {
  const GridSpec s = cube(3, 1.0, -1.5);
  const std::vector<Gaussian> one{at(s.center(1, 1, 1), 1.0, 0.7)};
  for (auto mode : {AggregationMode::GF2, AggregationMode::Bernoulli, AggregationMode::Poisson}) {
    const auto grid = voxelize(one, s, mode, Temperature(1.0));
    Eigen::Index best;
    grid.values.maxCoeff(&best);
    EXPECT_EQ(static_cast<std::size_t>(best), s.index(1, 1, 1));
  }
}

TEST(Voxelize, MatchesBruteForceWithoutTruncation) {
  std::mt19937_64 rng(16);
  const GridSpec s = cube(8, 0.25, -1.0);
  VoxelizeOptions opts;
  opts.kernel = kExactKernel;
  for (int t = 0; t < 5; ++t) {
    oracle::GaussianRanges r;
    r.log_scale_lo = std::log(0.1);
    r.log_scale_hi = std::log(0.5);
    const auto gs = oracle::random_gaussians(rng, 10, r);
    const double tau = oracle::uniform(rng, 0.05, 2.0);
    for (auto mode : {AggregationMode::GF2, AggregationMode::Bernoulli, AggregationMode::Poisson}) {
      const auto got = voxelize(gs, s, mode, Temperature(tau), opts).values;
      EXPECT_LE((got - oracle::brute_voxelize(gs, s, mode, tau)).abs().maxCoeff(), 1e-9);
    }
  }
}

TEST(Voxelize, TruncationErrorIsTiny) {
  std::mt19937_64 rng(17);
  const GridSpec s = cube(8, 0.25, -1.0);
  const auto gs = oracle::random_gaussians(rng, 10);
  VoxelizeOptions exact;
  exact.kernel = kExactKernel;
  const auto a = voxelize(gs, s, AggregationMode::Poisson, Temperature(0.5)).values;
  const auto b = voxelize(gs, s, AggregationMode::Poisson, Temperature(0.5), exact).values;
  EXPECT_LE((a - b).abs().maxCoeff(), 10 * 1.6e-8);
}

TEST(Voxelize, CellCapIsResourceLimit) {
  VoxelizeOptions opts;
  opts.max_cells = 100;
  EXPECT_THROW(voxelize(kNone, cube(5, 1.0, 0.0), AggregationMode::GF2, Temperature(1.0), opts), ResourceLimit);
  GridSpec huge;
  huge.dims = {1 << 10, 1 << 10, 1 << 10};
  EXPECT_THROW(voxelize(kNone, huge, AggregationMode::GF2, Temperature(1.0)), ResourceLimit);
}

TEST(Voxelize, SupersampleAveragesSubLattice) {
  const GridSpec s = cube(2, 1.0, 0.0);
  const std::vector<Gaussian> one{at(Eigen::Vector3d(0.3, 0.6, 0.9), 0.5, 0.6)};
  VoxelizeOptions opts;
  opts.kernel = kExactKernel;
  opts.supersample = true;
  const auto grid = voxelize(one, s, AggregationMode::Bernoulli, Temperature(1.0), opts);
  for (std::size_t c = 0; c < s.cell_count(); ++c) {
    double sum = 0.0;
    const auto pts = voxel_sample_points(s, c, true);
    ASSERT_EQ(pts.size(), 8u);
    for (const auto& x : pts) sum += oracle::point_bernoulli(one, x, 1.0);
    EXPECT_NEAR(grid.values[static_cast<Eigen::Index>(c)], sum / 8.0, 1e-12);
  }
}

TEST(Voxelize, PoissonIntensityScale) {
  const GridSpec s = cube(3, 0.5, -0.75);
  const std::vector<Gaussian> one{at(kOrigin, 0.0, 0.5)};
  VoxelizeOptions opts;
  opts.intensity_scale = 2.0;
  const auto a = voxelize(one, s, AggregationMode::Poisson, Temperature(1.0), opts).values;
  const auto two = std::vector<Gaussian>{one[0], one[0]};
  const auto b = voxelize(two, s, AggregationMode::Poisson, Temperature(1.0)).values;
  EXPECT_LE((a - b).abs().maxCoeff(), 1e-15);
}

TEST(G2OBackward, ZeroUpstreamGivesZeroGradients) {
  std::mt19937_64 rng(18);
  const auto gs = oracle::random_gaussians(rng, 3);
  const GridSpec s = cube(4, 0.5, -1.0);
  const Eigen::ArrayXd up = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(s.cell_count()));
  for (auto mode : {AggregationMode::GF2, AggregationMode::Bernoulli, AggregationMode::Poisson}) {
    EXPECT_TRUE(pack_gradients<double>(g2o_backward(gs, s, mode, Temperature(1.0), up)).isZero(0.0));
  }
}

TEST(G2OBackward, ShapeMismatch) {
  const GridSpec s = cube(2, 1.0, 0.0);
  EXPECT_THROW(g2o_backward(kNone, s, AggregationMode::Poisson, Temperature(1.0), Eigen::ArrayXd::Zero(7)),
               ShapeMismatch);
}

TEST(G2OBackward, SingleGaussianSingleVoxelPoisson) {
  GridSpec s;
  s.dims = {1, 1, 1};
  s.origin = Eigen::Vector3d::Constant(-0.5);
  Gaussian g = at(Eigen::Vector3d(0.2, -0.1, 0.3), 0.7, 0.6);
  g.rotation = Eigen::Quaterniond(0.9, 0.1, -0.3, 0.2);
  const std::vector<Gaussian> gs{g};
  VoxelizeOptions opts;
  opts.kernel = kExactKernel;
  const Temperature tau(0.8);
  const auto analytic =
      pack_gradients<double>(g2o_backward(gs, s, AggregationMode::Poisson, tau, Eigen::ArrayXd::Ones(1), opts));
  auto f = [&](const Eigen::VectorXd& p) {
    std::vector<Gaussian> h = gs;
    unpack_parameters<double>(p, h);
    return voxelize(h, s, AggregationMode::Poisson, tau, opts).values[0];
  };
  EXPECT_LE(oracle::grouped_error(analytic, oracle::finite_difference(f, pack_parameters<double>(gs)), 2), 1e-3);
}

TEST(G2OBackward, GF2HasNoOpacityGradientAndNoEmbeddingGradient) {
  std::mt19937_64 rng(19);
  const auto gs = oracle::random_gaussians(rng, 4);
  const GridSpec s = cube(4, 0.5, -1.0);
  Eigen::ArrayXd up(static_cast<Eigen::Index>(s.cell_count()));
  for (auto& u : up) u = oracle::uniform(rng, -1, 1);
  for (auto mode : {AggregationMode::GF2, AggregationMode::Bernoulli, AggregationMode::Poisson}) {
    const auto grads = g2o_backward(gs, s, mode, Temperature(0.7), up);
    for (const auto& g : grads) {
      if (mode == AggregationMode::GF2) {
        EXPECT_EQ(g.opacity_logit, 0.0);
      }
      EXPECT_TRUE(g.embedding.isZero(0.0));
    }
  }
}

TEST(G2OBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(20);
  for (auto mode : {AggregationMode::GF2, AggregationMode::Bernoulli, AggregationMode::Poisson}) {
    for (int t = 0; t < 30; ++t) EXPECT_LE(gradcheck::g2o_error(rng, mode), 1e-3) << to_string(mode);
  }
}

TEST(G2OBackward, SupersampledGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  const GridSpec s = gradcheck::small_grid();
  const auto gs = oracle::random_gaussians(rng, 2);
  VoxelizeOptions opts;
  opts.kernel = kExactKernel;
  opts.supersample = true;
  opts.intensity_scale = 1.7;
  Eigen::ArrayXd up(static_cast<Eigen::Index>(s.cell_count()));
  for (auto& u : up) u = oracle::uniform(rng, -1, 1);
  const Temperature tau(0.6);
  const auto analytic = pack_gradients<double>(g2o_backward(gs, s, AggregationMode::Poisson, tau, up, opts));
  auto f = [&](const Eigen::VectorXd& p) {
    std::vector<Gaussian> h = gs;
    unpack_parameters<double>(p, h);
    return (voxelize(h, s, AggregationMode::Poisson, tau, opts).values * up).sum();
  };
  EXPECT_LE(oracle::grouped_error(analytic, oracle::finite_difference(f, pack_parameters<double>(gs)), 3), 1e-3);
}

TEST(G2OBackward, AgreesAcrossWorkerCounts) {
  std::mt19937_64 rng(22);
  const GridSpec s = cube(12, 0.2, -1.2);
  const auto gs = oracle::random_gaussians(rng, 20);
  Eigen::ArrayXd up(static_cast<Eigen::Index>(s.cell_count()));
  for (auto& u : up) u = oracle::uniform(rng, -1, 1);
  const int saved = num_threads();
  set_num_threads(1);
  const auto a = pack_gradients<double>(g2o_backward(gs, s, AggregationMode::Poisson, Temperature(0.5), up));
  const auto va = voxelize(gs, s, AggregationMode::Poisson, Temperature(0.5)).values;
  set_num_threads(4);
  const auto b = pack_gradients<double>(g2o_backward(gs, s, AggregationMode::Poisson, Temperature(0.5), up));
  const auto b2 = pack_gradients<double>(g2o_backward(gs, s, AggregationMode::Poisson, Temperature(0.5), up));
  const auto vb = voxelize(gs, s, AggregationMode::Poisson, Temperature(0.5)).values;
  set_num_threads(saved);
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(b, b2);
  EXPECT_TRUE((va == vb).all());
}

TEST(Binarize, ThresholdIsInclusive) {
  OccupancyGrid g = OccupancyGrid::zeros(cube(1, 1.0, 0.0));
  g.values[0] = 0.5;
  EXPECT_EQ(binarize(g)[0], 1);
  g.values[0] = std::nextafter(0.5, 0.0);
  EXPECT_EQ(binarize(g)[0], 0);
}
