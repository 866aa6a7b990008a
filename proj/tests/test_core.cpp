#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "gsocc/core.hpp"
#include "oracles.hpp"

using namespace gsocc;

namespace {

const double kLn2 = std::log(2.0);

Eigen::Quaterniond about_z(double deg) {
  return Eigen::Quaterniond(Eigen::AngleAxisd(deg * M_PI / 180.0, Eigen::Vector3d::UnitZ()));
}

Gaussian unit_gaussian() {
  Gaussian g;
  g.embedding = Eigen::VectorXd::Zero(2);
  return g;
}

}  // namespace

TEST(BuildCovariance, IdentityRotationZeroScale) {
  const auto S = build_covariance<double>(Eigen::Quaterniond::Identity(), Eigen::Vector3d::Zero());
  EXPECT_TRUE(S.isApprox(Eigen::Matrix3d::Identity(), 1e-15));
}

TEST(BuildCovariance, AxisAlignedScaling) {
  const auto S = build_covariance<double>(Eigen::Quaterniond::Identity(), Eigen::Vector3d(kLn2, 0, 0));
  EXPECT_NEAR((S - Eigen::Vector3d(4, 1, 1).asDiagonal().toDenseMatrix()).norm(), 0.0, 1e-12);
}

TEST(BuildCovariance, QuarterTurnAboutZSwapsAxes) {
  const auto S = build_covariance<double>(about_z(90), Eigen::Vector3d(kLn2, 0, 0));
  EXPECT_NEAR((S - Eigen::Vector3d(1, 4, 1).asDiagonal().toDenseMatrix()).norm(), 0.0, 1e-12);
}

TEST(BuildCovariance, RejectsNonFinite) {
  EXPECT_THROW(build_covariance<double>(Eigen::Quaterniond::Identity(), Eigen::Vector3d(NAN, 0, 0)),
               InvalidParameter);
  EXPECT_THROW(build_covariance<double>(Eigen::Quaterniond(INFINITY, 0, 0, 0), Eigen::Vector3d::Zero()),
               InvalidParameter);
}

TEST(BuildCovariance, SpectrumMatchesScalesForAnyRotation) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    const auto q = oracle::random_rotation(rng);
    const Eigen::Vector3d ls = oracle::uniform3(rng, -2.0, 1.0);
    const auto S = build_covariance<double>(q, ls);
    EXPECT_NEAR((S - S.transpose()).cwiseAbs().maxCoeff(), 0.0, 1e-12);
    Eigen::Vector3d ev = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(S).eigenvalues();
    Eigen::Vector3d want = (2.0 * ls).array().exp();
    std::sort(ev.data(), ev.data() + 3);
    std::sort(want.data(), want.data() + 3);
    EXPECT_LT((ev - want).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_GT(ev.minCoeff(), 0.0);
  }
}

TEST(EvalKernel, Examples) {
  Gaussian g = unit_gaussian();
  g.mean = Eigen::Vector3d(0.3, -0.2, 1.0);
  EXPECT_EQ(eval_kernel(g, g.mean), 1.0);
  EXPECT_NEAR(eval_kernel(g, Eigen::Vector3d(g.mean + Eigen::Vector3d(0, 1, 0)), kExactKernel), std::exp(-0.5), 1e-15);
  EXPECT_NEAR(0.60653, std::exp(-0.5), 1e-5);
  EXPECT_LT(eval_kernel(g, Eigen::Vector3d(g.mean + Eigen::Vector3d(10, 0, 0)), kExactKernel), 1e-21);
}

TEST(EvalKernel, EqualsOneOnlyAtMean) {
  Gaussian g = unit_gaussian();
  EXPECT_LT(eval_kernel(g, Eigen::Vector3d(1e-6, 0, 0)), 1.0);
}

TEST(EvalKernel, TruncatesBeyondRadius) {
  Gaussian g = unit_gaussian();
  EXPECT_EQ(eval_kernel(g, Eigen::Vector3d(6.01, 0, 0)), 0.0);
  EXPECT_GT(eval_kernel(g, Eigen::Vector3d(5.99, 0, 0)), 0.0);
  EXPECT_GT(eval_kernel(g, Eigen::Vector3d(6.01, 0, 0), kExactKernel), 0.0);
}

TEST(EvalKernel, SingularCovarianceIsDegenerate) {
  Gaussian g = unit_gaussian();
  g.log_scale = Eigen::Vector3d(std::log(1e-7), 0, 0);  // variance 1e-14
  EXPECT_THROW(eval_kernel(g, Eigen::Vector3d(0, 0, 0)), NumericalDegeneracy);
  g.log_scale = Eigen::Vector3d(std::log(1e-6), 0, 0);  // variance exactly at the guard
  EXPECT_NO_THROW(eval_kernel(g, Eigen::Vector3d(0, 0, 0)));
}

TEST(EvalKernel, RigidTransformInvariance) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 200; ++t) {
    Gaussian g = oracle::random_gaussian(rng);
    const Eigen::Vector3d x = g.mean + oracle::uniform3(rng, -1.0, 1.0);
    const Eigen::Quaterniond Q = oracle::random_rotation(rng);
    const Eigen::Vector3d T = oracle::uniform3(rng, -5.0, 5.0);
    Gaussian h = g;
    h.mean = Q * g.mean + T;
    h.rotation = Q * g.rotation;
    EXPECT_NEAR(eval_kernel(g, x, kExactKernel), eval_kernel(h, Eigen::Vector3d(Q * x + T), kExactKernel), 1e-9);
  }
}

TEST(EvalKernel, MatchesExplicitInverse) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const Gaussian g = oracle::random_gaussian(rng);
    const Eigen::Vector3d x = g.mean + oracle::uniform3(rng, -1.0, 1.0);
    EXPECT_NEAR(eval_kernel(g, x, kExactKernel), oracle::kernel(g, x), 1e-12);
  }
}

TEST(TemperedOpacity, Examples) {
  for (double tau : {1e-6, 1e-3, 0.5, 1.0, 7.0, 1e3}) EXPECT_EQ(tempered_opacity(0.0, Temperature(tau)), 0.5);
  EXPECT_NEAR(tempered_opacity(2.0, Temperature(1.0)), 1.0 / (1.0 + std::exp(-2.0)), 1e-15);
  EXPECT_NEAR(tempered_opacity(2.0, Temperature(1.0)), 0.88080, 1e-5);
  EXPECT_NEAR(tempered_opacity(2.0, Temperature(1e-3)), 1.0, 1e-12);
}

TEST(TemperedOpacity, SaturatesWithoutNaN) {
  for (double l : {-1e300, -1e6, -800.0, 800.0, 1e6, 1e300}) {
    const double a = tempered_opacity(l, Temperature(1e-6));
    EXPECT_FALSE(std::isnan(a));
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
    EXPECT_FALSE(std::isnan(tempered_opacity_grad(l, Temperature(1e-6))));
  }
}

TEST(TemperedOpacity, MonotoneInLogit) {
  const Temperature tau(0.3);
  double prev = 0.0;
  for (double l = -5.0; l <= 5.0; l += 0.01) {
    const double a = tempered_opacity(l, tau);
    EXPECT_GE(a, prev);
    prev = a;
  }
}

TEST(TemperedOpacity, LowerTemperatureSharpens) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 500; ++t) {
    const double l = oracle::uniform(rng, -5.0, 5.0);
    double t1 = std::pow(10.0, oracle::uniform(rng, -4.0, 2.0));
    double t2 = std::pow(10.0, oracle::uniform(rng, -4.0, 2.0));
    if (t1 > t2) std::swap(t1, t2);
    const double a1 = tempered_opacity(l, Temperature(t1)), a2 = tempered_opacity(l, Temperature(t2));
    if (l > 0) {
      EXPECT_GE(a1, a2);
    } else if (l < 0) {
      EXPECT_LE(a1, a2);
    }
  }
}

TEST(TemperatureType, ClampsAndRejects) {
  EXPECT_EQ(Temperature(1e-9).value(), kMinTau);
  EXPECT_EQ(Temperature(1e9).value(), kMaxTau);
  EXPECT_EQ(Temperature(0.25).value(), 0.25);
  EXPECT_THROW(Temperature{0.0}, InvalidParameter);
  EXPECT_THROW(Temperature{-1.0}, InvalidParameter);
  EXPECT_THROW(Temperature{NAN}, InvalidParameter);
  EXPECT_THROW(Temperature{INFINITY}, InvalidParameter);
}

TEST(EffectiveOpacity, Examples) {
  Gaussian g = unit_gaussian();
  EXPECT_EQ(effective_opacity_3d(g, g.mean, Temperature(1.0)), 0.5);
  g.opacity_logit = 2.0;
  EXPECT_NEAR(effective_opacity_3d(g, Eigen::Vector3d(0, 0, 1), Temperature(1.0)),
              std::exp(-0.5) / (1.0 + std::exp(-2.0)), 1e-15);
  EXPECT_NEAR(effective_opacity_3d(g, Eigen::Vector3d(0, 0, 1), Temperature(1.0)), 0.53423, 1e-5);
  g.opacity_logit = -50.0;
  EXPECT_LT(effective_opacity_3d(g, g.mean, Temperature(1.0)), 1e-20);
}

TEST(Sanitize, NormalizesQuaternionAndClampsScale) {
  Gaussian g = unit_gaussian();
  g.rotation = Eigen::Quaterniond(2.0, 0.0, 2.0, 0.0);
  g.log_scale = Eigen::Vector3d(-50.0, 0.0, 50.0);
  g.sanitize();
  EXPECT_NEAR(g.rotation.norm(), 1.0, 1e-12);
  EXPECT_NEAR(std::exp(g.log_scale[0]), kMinScale, 1e-15);
  EXPECT_NEAR(std::exp(g.log_scale[2]), kMaxScale, 1e-9);
  EXPECT_EQ(g.log_scale[1], 0.0);
  Gaussian z = unit_gaussian();
  z.rotation = Eigen::Quaterniond(0, 0, 0, 0);
  EXPECT_THROW(z.sanitize(), InvalidParameter);
}

TEST(CommonDim, RejectsMixedDimensions) {
  std::vector<Gaussian> gs(2, unit_gaussian());
  EXPECT_EQ(common_dim(gs), 2);
  gs[1].embedding = Eigen::VectorXd::Zero(3);
  EXPECT_THROW(common_dim(gs), InvalidParameter);
}

TEST(PackParameters, RoundTripsRecordOrder) {
  std::mt19937_64 rng(5);
  auto gs = oracle::random_gaussians(rng, 4);
  const auto flat = pack_parameters<double>(gs);
  ASSERT_EQ(flat.size(), 4 * (kGeometryParams + 3));
  EXPECT_EQ(flat[3], gs[0].rotation.w());
  EXPECT_EQ(flat[4], gs[0].rotation.x());
  EXPECT_EQ(flat[10], gs[0].opacity_logit);
  std::vector<Gaussian> back(4, oracle::random_gaussian(rng));
  unpack_parameters<double>(flat, back);
  EXPECT_EQ(back, gs);
}

// Gradients of kernel, tempered opacity and effective opacity with respect
// to every field, against central differences.
TEST(CoreGradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 100; ++t) {
    const Gaussian g = oracle::random_gaussian(rng);
    const Eigen::Vector3d x = g.mean + oracle::uniform3(rng, -0.6, 0.6);
    const Temperature tau(oracle::uniform(rng, 0.3, 2.0));
    const auto f = make_frame(g);
    const double p = eval_kernel(f, x, kExactKernel);

    for (int which = 0; which < 3; ++which) {
      // 0: kernel, 1: tempered opacity, 2: effective opacity.
      FrameGrad<double> fg;
      if (which != 1) kernel_backward(f, x, p, which == 2 ? tempered_opacity(g.opacity_logit, tau) : 1.0, fg);
      if (which != 0) fg.opacity = which == 2 ? p : 1.0;
      GaussianGrad<double> gg = GaussianGrad<double>::zero(3);
      fg.finalize_into(g, tau, gg);
      const std::vector<GaussianGrad<double>> list{gg};
      const Eigen::VectorXd analytic = pack_gradients<double>(list);

      const std::vector<Gaussian> base{g};
      auto fn = [&](const Eigen::VectorXd& q) {
        std::vector<Gaussian> h = base;
        unpack_parameters<double>(q, h);
        if (which == 0) return eval_kernel(h[0], x, kExactKernel);
        if (which == 1) return tempered_opacity(h[0].opacity_logit, tau);
        return effective_opacity_3d(h[0], x, tau, kExactKernel);
      };
      const auto numeric = oracle::finite_difference(fn, pack_parameters<double>(base));
      EXPECT_LE(oracle::grouped_error(analytic, numeric, 3), 1e-3) << "op " << which << " trial " << t;
    }
  }
}

TEST(CovarianceBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 50; ++t) {
    const Gaussian g = oracle::random_gaussian(rng);
    Eigen::Matrix3d W;
    for (int i = 0; i < 9; ++i) W.data()[i] = oracle::uniform(rng, -1, 1);
    FrameGrad<double> fg;
    covariance_backward(make_frame(g), W, fg);
    GaussianGrad<double> gg = GaussianGrad<double>::zero(3);
    fg.finalize_into(g, Temperature(1.0), gg);
    const std::vector<GaussianGrad<double>> list{gg};
    const std::vector<Gaussian> base{g};
    auto fn = [&](const Eigen::VectorXd& q) {
      std::vector<Gaussian> h = base;
      unpack_parameters<double>(q, h);
      return (build_covariance(h[0].rotation, h[0].log_scale).array() * W.array()).sum();
    };
    const auto numeric = oracle::finite_difference(fn, pack_parameters<double>(base));
    EXPECT_LE(oracle::grouped_error(pack_gradients<double>(list), numeric, 3), 1e-3);
  }
}
