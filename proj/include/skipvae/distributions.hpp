// Spherical-Gaussian prior, diagonal-Gaussian posterior and Bernoulli
// likelihood. All kernels return one value per row (example).
#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>

#include "skipvae/tensor.hpp"

namespace skipvae {

inline constexpr double kLogTwoPi = 1.8378770664093454836;  // ln(2 pi)

/// Diagonal Gaussian, batch x D. The prior is mean = 0, logvar = 0.
struct GaussianParams {
  Tensor mean;
  Tensor logvar;

  std::size_t batch() const { return mean.rows(); }
  std::size_t dim() const { return mean.cols(); }

  GaussianParams detached() const { return {mean.detached(), logvar.detached()}; }

  static GaussianParams prior(std::size_t batch, std::size_t dim) {
    return {Tensor::zeros({batch, dim}), Tensor::zeros({batch, dim})};
  }
};

inline void check_gaussian(const GaussianParams& q) {
  if (q.mean.shape() != q.logvar.shape() || q.mean.rank() != 2) {
    throw ShapeError("GaussianParams: mean " + to_string(q.mean.shape()) + " and logvar " +
                     to_string(q.logvar.shape()) + " must be equal rank-2 shapes");
  }
}

/// KL(q || N(0, I)) per example: 0.5 * sum_d (mu^2 + sigma^2 - log sigma^2 - 1).
inline Tensor gaussian_kl_to_prior(const GaussianParams& q) {
  check_gaussian(q);
  Tensor terms = add_scalar(sub(add(square(q.mean), exp(q.logvar)), q.logvar), -1.0);
  return scale(sum(terms, 1), 0.5);
}

/// z = mean + exp(logvar / 2) * noise.
inline Tensor reparam_sample(const GaussianParams& q, const Tensor& noise) {
  check_gaussian(q);
  if (noise.shape() != q.mean.shape()) {
    throw ShapeError("reparam_sample: noise " + to_string(noise.shape()) + " vs posterior " +
                     to_string(q.mean.shape()));
  }
  return add(q.mean, mul(exp(scale(q.logvar, 0.5)), noise));
}

inline void check_binary(const Tensor& x) {
  for (double v : x.values()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("bernoulli_log_prob: observations must be 0 or 1");
  }
}

/// sum_p [x * logit - log(1 + exp(logit))] per example.
inline Tensor bernoulli_log_prob(const Tensor& logits, const Tensor& x) {
  if (logits.shape() != x.shape() || logits.rank() != 2) {
    throw ShapeError("bernoulli_log_prob: logits " + to_string(logits.shape()) + " vs data " +
                     to_string(x.shape()));
  }
  check_binary(x);
  return sum(sub(mul(x, logits), softplus(logits)), 1);
}

/// log N(z_i; mean_i, diag(exp(logvar_i))) for each row i.
inline Tensor gaussian_log_density(const Tensor& z, const GaussianParams& q) {
  check_gaussian(q);
  if (z.shape() != q.mean.shape()) {
    throw ShapeError("gaussian_log_density: z " + to_string(z.shape()) + " vs posterior " +
                     to_string(q.mean.shape()));
  }
  Tensor maha = mul(square(sub(z, q.mean)), exp(neg(q.logvar)));
  Tensor per_dim = add_scalar(add(maha, q.logvar), kLogTwoPi);
  return scale(sum(per_dim, 1), -0.5);
}

// Plain-double kernels for the estimators, which evaluate millions of
// density pairs and never need gradients.

inline double diag_gaussian_log_density(std::span<const double> z, std::span<const double> mean,
                                        std::span<const double> logvar) {
  double acc = 0.0;
  for (std::size_t d = 0; d < z.size(); ++d) {
    double diff = z[d] - mean[d];
    acc += diff * diff * std::exp(-logvar[d]) + logvar[d] + kLogTwoPi;
  }
  return -0.5 * acc;
}

inline double standard_normal_log_density(std::span<const double> z) {
  double acc = 0.0;
  for (double v : z) acc += v * v + kLogTwoPi;
  return -0.5 * acc;
}

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace skipvae
