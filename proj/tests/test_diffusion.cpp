#include "muse/diffusion.hpp"

#include <gtest/gtest.h>

#include <limits>
#include <random>

namespace muse {
namespace {

MatF scalar(float v) { return MatF::Constant(1, 1, v); }

MatF randn(std::mt19937_64& rng, int rows, int cols) {
  std::normal_distribution<float> n;
  MatF m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

TEST(Schedule, TwoStepHalfBetas) {
  const auto s = make_linear_schedule(2, 0.5, 0.5);
  ASSERT_EQ(s.steps, 2);
  EXPECT_DOUBLE_EQ(s.alpha[0], 0.5);
  EXPECT_DOUBLE_EQ(s.alpha[1], 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar[0], 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar[1], 0.25);
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(0), 1.0);
}

TEST(Schedule, DefaultIsStrictlyDecreasingAndMatchesProduct) {
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  EXPECT_DOUBLE_EQ(s.beta.front(), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta.back(), 0.02);
  long double prod = 1.0L;
  for (int t = 1; t <= 1000; ++t) {
    prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * (t - 1) / 999.0L);
    const double ab = s.alpha_bar_at(t);
    EXPECT_GT(ab, 0.0);
    EXPECT_LT(ab, 1.0);
    EXPECT_NEAR(ab / static_cast<double>(prod), 1.0, 1e-12);
    if (t > 1) EXPECT_LT(ab, s.alpha_bar_at(t - 1));
  }
}

TEST(Schedule, RejectsBadBetas) {
  EXPECT_THROW(make_linear_schedule(10, 0.0, 0.02), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(10, 0.02, 0.01), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(10, 1e-4, 1.0), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(1, 1e-4, 0.02), std::invalid_argument);
}

TEST(Schedule, StridedKeepsBaseAlphaBar) {
  const auto base = make_linear_schedule(1000, 1e-4, 0.02);
  const auto s = make_strided_schedule(base, 50);
  ASSERT_EQ(s.steps, 50);
  EXPECT_EQ(s.model_t(50), 1000);
  for (int t = 1; t <= 50; ++t) {
    EXPECT_DOUBLE_EQ(s.alpha_bar_at(t), base.alpha_bar_at(s.model_t(t)));
    if (t > 1) EXPECT_GT(s.model_t(t), s.model_t(t - 1));
    // Re-derived alphas keep the product identity.
    EXPECT_NEAR(s.alpha_bar_at(t), s.alpha_bar_at(t - 1) * s.alpha[static_cast<std::size_t>(t - 1)], 1e-15);
  }
  EXPECT_THROW(s.model_t(51), ShapeError);
}

TEST(Diffuse, ScalarExampleAndLimits) {
  EXPECT_NEAR(diffuse_with(scalar(1.0f), scalar(0.5f), 0.64)(0, 0), 1.1f, 1e-6);
  EXPECT_NEAR(clean_from(scalar(1.1f), scalar(0.5f), 0.64)(0, 0), 1.0f, 1e-6);
  EXPECT_EQ(diffuse_with(scalar(0.3f), scalar(0.9f), 1.0)(0, 0), 0.3f);
  EXPECT_NEAR(diffuse_with(scalar(0.3f), scalar(0.9f), 0.0)(0, 0), 0.9f, 1e-7);
  EXPECT_EQ(clean_from(scalar(0.7f), scalar(0.0f), 1.0)(0, 0), 0.7f);
}

TEST(Diffuse, PredictCleanRejectsVanishingAlphaBar) {
  EXPECT_THROW(clean_from(scalar(1.0f), scalar(0.0f), 1e-13), NumericDomainError);
  EXPECT_THROW(diffuse_with(MatF::Zero(2, 2), MatF::Zero(2, 3), 0.5), ShapeError);
}

TEST(Diffuse, ForwardThenCleanIsIdentity) {
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> pick(1, 1000);
  for (int i = 0; i < 200; ++i) {
    const MatF z0 = randn(rng, 16, 3), eps = randn(rng, 16, 3);
    const int t = pick(rng);
    const MatF back = predict_clean(forward_diffuse(z0, t, eps, s), eps, t, s);
    // Division by sqrt(alpha_bar) amplifies float rounding at large t.
    const double tol = 1e-5 / std::sqrt(s.alpha_bar_at(t));
    EXPECT_LT((back - z0).cwiseAbs().maxCoeff(), tol) << "t=" << t;
    const MatF zt = randn(rng, 16, 3);
    EXPECT_LT((forward_diffuse(predict_clean(zt, eps, t, s), t, eps, s) - zt).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Ddim, LastStepEqualsCleanEstimate) {
  const auto s = make_strided_schedule(make_linear_schedule(1000, 1e-4, 0.02), 50);
  std::mt19937_64 rng(2);
  const MatF z = randn(rng, 8, 3), e = randn(rng, 8, 3);
  EXPECT_LT((ddim_step(z, e, 1, s) - predict_clean(z, e, 1, s)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Ddim, ExactEpsTrajectoryReachesClean) {
  // With the true noise every step keeps z_t on the line through z0 and eps.
  const auto s = make_strided_schedule(make_linear_schedule(1000, 1e-4, 0.02), 50);
  const MatF z0 = scalar(0.37f), eps = scalar(-1.2f);
  MatD z = diffuse_with(z0, eps, s.alpha_bar_at(50)).cast<double>();
  for (int t = 50; t >= 1; --t) {
    z = ddim_step(z, eps.cast<double>(), t, s);
    EXPECT_NEAR(z(0, 0), std::sqrt(s.alpha_bar_at(t - 1)) * 0.37 + std::sqrt(1 - s.alpha_bar_at(t - 1)) * -1.2,
                1e-5);
  }
  EXPECT_NEAR(z(0, 0), 0.37, 1e-5);  // float start point, amplified by 1 / sqrt(ab_T)
}

TEST(Ddim, FixedPointWhenAlphaBarUnchanged) {
  NoiseSchedule s;
  s.steps = 2;
  s.alpha_bar = {0.5, 0.5};
  s.alpha = {0.5, 1.0};
  s.beta = {0.5, 0.0};
  s.model_timestep = {1, 2};
  const MatF z = diffuse_with(scalar(0.2f), scalar(0.4f), 0.5);
  EXPECT_NEAR(ddim_step(z, scalar(0.4f), 2, s)(0, 0), z(0, 0), 1e-7);
}

TEST(Ddim, InvertThenStepRoundTrip) {
  const auto s = make_strided_schedule(make_linear_schedule(1000, 1e-4, 0.02), 50);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> pick(1, 50);
  for (int i = 0; i < 200; ++i) {
    const MatF z = randn(rng, 16, 3), e = randn(rng, 16, 3);
    const int t = pick(rng);
    EXPECT_LT((ddim_step(ddim_invert_step(z, e, t, s), e, t, s) - z).cwiseAbs().maxCoeff(), 1e-5);
  }
  // t = 1 inverts the clean step: z1 = sqrt(ab1) z0 + sqrt(1 - ab1) e.
  const MatF z0 = scalar(0.25f), e = scalar(0.5f);
  EXPECT_NEAR(ddim_invert_step(z0, e, 1, s)(0, 0), diffuse_with(z0, e, s.alpha_bar_at(1))(0, 0), 1e-6);
}

TEST(Guidance, CfgExamples) {
  EXPECT_FLOAT_EQ(cfg_combine(scalar(1.0f), scalar(0.0f), 7.5)(0, 0), 8.5f);
  EXPECT_FLOAT_EQ(cfg_combine(scalar(0.3f), scalar(-2.0f), 0.0)(0, 0), 0.3f);
  EXPECT_FLOAT_EQ(cfg_combine(scalar(0.3f), scalar(0.3f), 12.0)(0, 0), 0.3f);
  // Affine in omega.
  const float a = cfg_combine(scalar(1.3f), scalar(0.2f), 1.0)(0, 0);
  const float b = cfg_combine(scalar(1.3f), scalar(0.2f), 3.0)(0, 0);
  const float c = cfg_combine(scalar(1.3f), scalar(0.2f), 2.0)(0, 0);
  EXPECT_NEAR(c, 0.5f * (a + b), 1e-6);
  EXPECT_THROW(cfg_combine(MatF::Zero(1, 2), MatF::Zero(2, 1), 1.0), ShapeError);
}

TEST(Guidance, CgExamples) {
  EXPECT_FLOAT_EQ(cg_combine(scalar(0.0f), scalar(1.0f), 1.0)(0, 0), 2.0f);
  EXPECT_FLOAT_EQ(cg_combine(scalar(0.4f), scalar(0.0f), 5.0)(0, 0), 0.4f);
  EXPECT_FLOAT_EQ(cg_combine(scalar(0.4f), scalar(3.0f), -1.0)(0, 0), 0.4f);
  EXPECT_THROW(cg_combine(MatF::Zero(1, 2), MatF::Zero(2, 1), 1.0), ShapeError);
}

}  // namespace
}  // namespace muse
