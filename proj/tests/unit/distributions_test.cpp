#include <gtest/gtest.h>

#include <cmath>

#include "skipvae/distributions.hpp"
#include "skipvae/rng.hpp"

using namespace skipvae;

TEST(GaussianKl, PriorHasZeroKl) {
  auto q = GaussianParams::prior(3, 4);
  Tensor kl = gaussian_kl_to_prior(q);
  for (double v : kl.values()) EXPECT_EQ(v, 0.0);
}

TEST(GaussianKl, OneDimensionalClosedForm) {
  // KL(N(1, e) || N(0, 1)) = 0.5 * (1 + e - 1 - 1) = 0.5 * (e - 1)
  GaussianParams q{Tensor::matrix(1, 1, {1.0}), Tensor::matrix(1, 1, {1.0})};
  EXPECT_NEAR(gaussian_kl_to_prior(q).item(), 0.5 * (std::exp(1.0) - 1.0), 1e-15);
}

TEST(GaussianKl, MatchesMonteCarloEstimate) {
  GaussianParams q{Tensor::matrix(1, 2, {0.7, -0.3}), Tensor::matrix(1, 2, {-0.5, 0.4})};
  const double exact = gaussian_kl_to_prior(q).item();
  Rng rng(11);
  const std::size_t n = 200000;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor z = reparam_sample(q, standard_normal(rng, {1, 2}));
    acc += diag_gaussian_log_density(z.values(), q.mean.values(), q.logvar.values()) -
           standard_normal_log_density(z.values());
  }
  EXPECT_NEAR(acc / n, exact, 0.01);
}

TEST(Bernoulli, LogProbAtZeroLogitIsMinusPLogTwo) {
  Tensor logits = Tensor::zeros({2, 5});
  Tensor x = Tensor::matrix(2, 5, {1, 0, 1, 0, 1, 0, 0, 0, 0, 0});
  Tensor lp = bernoulli_log_prob(logits, x);
  EXPECT_NEAR(lp[0], -5 * std::log(2.0), 1e-14);
  EXPECT_NEAR(lp[1], -5 * std::log(2.0), 1e-14);
}

TEST(Bernoulli, ExtremeLogitsStayFinite) {
  Tensor logits = Tensor::matrix(1, 2, {-700.0, 700.0});
  Tensor x = Tensor::matrix(1, 2, {1.0, 0.0});
  Tensor lp = bernoulli_log_prob(logits, x);
  EXPECT_NEAR(lp.item(), -1400.0, 1e-9);
}

TEST(Bernoulli, RejectsNonBinaryObservations) {
  EXPECT_THROW(bernoulli_log_prob(Tensor::zeros({1, 2}), Tensor::matrix(1, 2, {0.5, 1.0})),
               std::invalid_argument);
}

TEST(Bernoulli, ShapeMismatch) {
  EXPECT_THROW(bernoulli_log_prob(Tensor::zeros({1, 2}), Tensor::zeros({1, 3})), ShapeError);
}

TEST(Reparam, ZeroNoiseReturnsMean) {
  GaussianParams q{Tensor::matrix(1, 2, {0.3, -2.0}), Tensor::matrix(1, 2, {1.0, -1.0})};
  Tensor z = reparam_sample(q, Tensor::zeros({1, 2}));
  EXPECT_EQ(z[0], 0.3);
  EXPECT_EQ(z[1], -2.0);
}

TEST(Reparam, GradientsWithRespectToMeanAndLogvar) {
  Tape tape;
  GaussianParams q{tape.variable(Tensor::matrix(1, 1, {0.5})), tape.variable(Tensor::matrix(1, 1, {0.2}))};
  Tensor eps = Tensor::matrix(1, 1, {1.3});
  auto g = tape.backward(sum_all(reparam_sample(q, eps)));
  EXPECT_DOUBLE_EQ(g.of(q.mean).item(), 1.0);
  EXPECT_NEAR(g.of(q.logvar).item(), 0.5 * std::exp(0.1) * 1.3, 1e-15);
}

TEST(Density, TapeOpAgreesWithPlainKernel) {
  GaussianParams q{Tensor::matrix(2, 3, {0.1, 0.2, 0.3, -1, 0, 1}), Tensor::matrix(2, 3, {0, -1, 1, 0.5, 0.5, -0.5})};
  Tensor z = Tensor::matrix(2, 3, {0.4, -0.2, 1.0, 0.0, 0.3, 0.9});
  Tensor lp = gaussian_log_density(z, q);
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_NEAR(lp[r],
                diag_gaussian_log_density(z.values().subspan(r * 3, 3), q.mean.values().subspan(r * 3, 3),
                                          q.logvar.values().subspan(r * 3, 3)),
                1e-13);
  }
}

TEST(LogSumExp, StableForLargeInputs) {
  std::vector<double> v{1000.0, 1000.0};
  EXPECT_NEAR(log_sum_exp(v), 1000.0 + std::log(2.0), 1e-12);
  std::vector<double> w{-1e300, -1e300};
  EXPECT_TRUE(std::isfinite(log_sum_exp(w)));
}
