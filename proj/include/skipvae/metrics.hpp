// Latent-collapse diagnostics: KL term, mutual information under the
// variational joint, active units, importance-sampled log-likelihood and a
// linear classification probe over posterior means.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "skipvae/dataset.hpp"
#include "skipvae/distributions.hpp"
#include "skipvae/models.hpp"
#include "skipvae/rng.hpp"
#include "skipvae/training.hpp"

namespace skipvae {

struct CollapseReport {
  std::string model_id;
  std::size_t dim = 0;
  std::size_t layers = 0;
  double elbo = 0.0;
  double recon = 0.0;
  double kl_term = 0.0;
  double mi_estimate = 0.0;
  double mi_standard_error = 0.0;
  std::size_t au_count = 0;
  double au_threshold = 0.01;
  double is_nll = 0.0;  // importance-sampled log marginal likelihood, nats/example
  std::size_t n_eval = 0;
  std::size_t n_mi_points = 0;
  std::size_t mi_samples_per_point = 0;
  std::uint64_t seed = 0;

  // Not exported; used by the bound-ordering checks.
  double elbo_standard_error = 0.0;
  double is_standard_error = 0.0;
  std::vector<double> au_variances;
};

struct Estimate {
  double value = 0.0;
  double standard_error = 0.0;
};

inline Estimate mean_and_standard_error(std::span<const double> v) {
  if (v.empty()) return {};
  const double n = static_cast<double>(v.size());
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / (n - 1.0) / n)};
}

/// Posterior parameters for every example, computed in batches.
inline GaussianParams encode_dataset(const Dataset& data, const EncoderParams& enc, Activation act,
                                     std::size_t batch_size = 500) {
  if (data.empty()) throw DataError("cannot encode an empty dataset");
  std::vector<double> mean, logvar;
  std::size_t d = 0;
  for (std::size_t begin = 0; begin < data.count; begin += batch_size) {
    const std::size_t end = std::min(data.count, begin + batch_size);
    auto q = encode(data.rows_tensor(begin, end), enc, act);
    d = q.dim();
    mean.insert(mean.end(), q.mean.values().begin(), q.mean.values().end());
    logvar.insert(logvar.end(), q.logvar.values().begin(), q.logvar.values().end());
  }
  return {Tensor::matrix(data.count, d, std::move(mean)), Tensor::matrix(data.count, d, std::move(logvar))};
}

// ---------------------------------------------------------------------------
// KL term
// ---------------------------------------------------------------------------

/// Mean analytic KL(q(z|x) || p(z)) over the encoded posteriors.
inline double kl_term(const GaussianParams& posteriors) {
  if (posteriors.batch() == 0) throw DataError("kl_term needs at least one example");
  return mean(gaussian_kl_to_prior(posteriors), 0).item();
}

inline double kl_term(const Dataset& data, const VaeParams& params, Activation act) {
  return kl_term(encode_dataset(data, params.encoder, act));
}

// ---------------------------------------------------------------------------
// Mutual information
// ---------------------------------------------------------------------------

struct MiEstimate {
  double mi = 0.0;
  double standard_error = 0.0;
  std::size_t points = 0;
  std::size_t samples_per_point = 0;
};

/// I_q(x, z) = E[log q(z|x)] - E[log q(z)], with z^(s) ~ q(z|x_s) for each of
/// N evaluation points and log q(z) replaced by the log-mean of the N
/// encoded posterior densities. Every per-sample term is at most ln N, so the
/// estimate never exceeds ln N.
inline MiEstimate mutual_information(const GaussianParams& posteriors, std::size_t n_points,
                                     std::size_t samples_per_point, std::uint64_t seed) {
  check_gaussian(posteriors);
  if (n_points < 2) throw std::invalid_argument("mutual_information needs at least 2 evaluation points");
  if (samples_per_point == 0) throw std::invalid_argument("mutual_information needs at least 1 sample per point");
  if (n_points > posteriors.batch()) {
    throw std::invalid_argument("mutual_information: " + std::to_string(n_points) + " points requested but only " +
                                std::to_string(posteriors.batch()) + " examples available");
  }
  Rng rng = substream(seed, "metrics/mi");
  std::vector<std::size_t> pick(posteriors.batch());
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  if (n_points < pick.size()) {
    std::shuffle(pick.begin(), pick.end(), rng);
    pick.resize(n_points);
  }

  const std::size_t n = n_points, dim = posteriors.dim();
  std::vector<double> mu(n * dim), inv_var(n * dim), sd(n * dim), norm(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < dim; ++d) {
      const double m = posteriors.mean.at(pick[i], d);
      const double lv = posteriors.logvar.at(pick[i], d);
      mu[i * dim + d] = m;
      inv_var[i * dim + d] = std::exp(-lv);
      sd[i * dim + d] = std::exp(0.5 * lv);
      norm[i] += lv + kLogTwoPi;
    }
  }
  const double log_n = std::log(static_cast<double>(n));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(dim), log_q(n), terms;
  terms.reserve(n * samples_per_point);
  for (std::size_t s = 0; s < samples_per_point; ++s) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t d = 0; d < dim; ++d) z[d] = mu[j * dim + d] + sd[j * dim + d] * normal(rng);
      for (std::size_t i = 0; i < n; ++i) {
        const double* m = &mu[i * dim];
        const double* iv = &inv_var[i * dim];
        double acc = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
          const double diff = z[d] - m[d];
          acc += diff * diff * iv[d];
        }
        log_q[i] = -0.5 * (acc + norm[i]);
      }
      const double log_aggregate = log_sum_exp(log_q) - log_n;
      terms.push_back(std::min(log_q[j] - log_aggregate, log_n));
    }
  }
  auto est = mean_and_standard_error(terms);
  return {std::min(est.value, log_n), est.standard_error, n, samples_per_point};
}

// ---------------------------------------------------------------------------
// Active units
// ---------------------------------------------------------------------------

struct ActiveUnits {
  std::size_t count = 0;
  std::vector<double> variances;  // unbiased variance of E_q[z_d] across the dataset
  double threshold = 0.01;
};

inline ActiveUnits active_units(const Tensor& posterior_means, double epsilon = 0.01) {
  if (posterior_means.rank() != 2 || posterior_means.rows() < 2) {
    throw DataError("active_units needs at least 2 examples");
  }
  const std::size_t n = posterior_means.rows(), dim = posterior_means.cols();
  ActiveUnits out;
  out.threshold = epsilon;
  out.variances.assign(dim, 0.0);
  for (std::size_t d = 0; d < dim; ++d) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += posterior_means.at(i, d);
    m /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double diff = posterior_means.at(i, d) - m;
      ss += diff * diff;
    }
    out.variances[d] = ss / static_cast<double>(n - 1);
    if (out.variances[d] >= epsilon) ++out.count;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Importance-sampled log marginal likelihood
// ---------------------------------------------------------------------------

/// log (1/S) sum_s p(x, z_s) / q(z_s|x) for a single example, z_s ~ q(z|x).
/// `posterior` is 1 x D; `log_likelihood` maps S x D latents to S values.
inline double importance_log_marginal(const GaussianParams& posterior, const LogLikelihoodFn& log_likelihood,
                                      std::size_t samples, Rng& rng) {
  if (samples == 0) throw std::invalid_argument("importance sampling needs at least one sample");
  if (posterior.batch() != 1) throw ShapeError("importance_log_marginal expects a single posterior row");
  const std::size_t dim = posterior.dim();
  Tensor noise = standard_normal(rng, {samples, dim});
  std::vector<double> mean_rep(samples * dim), logvar_rep(samples * dim);
  for (std::size_t s = 0; s < samples; ++s) {
    std::copy_n(posterior.mean.values().begin(), dim, mean_rep.begin() + s * dim);
    std::copy_n(posterior.logvar.values().begin(), dim, logvar_rep.begin() + s * dim);
  }
  GaussianParams q{Tensor::matrix(samples, dim, std::move(mean_rep)), Tensor::matrix(samples, dim, std::move(logvar_rep))};
  Tensor z = reparam_sample(q, noise);
  Tensor ll = log_likelihood(z);
  Tensor lq = gaussian_log_density(z, q);
  std::vector<double> w(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    auto zs = z.values().subspan(s * dim, dim);
    w[s] = ll[s] + standard_normal_log_density(zs) - lq[s];
  }
  return log_sum_exp(w) - std::log(static_cast<double>(samples));
}

inline Tensor repeat_row(const Tensor& x, std::size_t row, std::size_t times) {
  const std::size_t p = x.cols();
  std::vector<double> v(times * p);
  for (std::size_t s = 0; s < times; ++s) std::copy_n(x.values().begin() + row * p, p, v.begin() + s * p);
  return Tensor::matrix(times, p, std::move(v));
}

/// Mean over the dataset of the per-example importance estimate; this is a
/// log-likelihood (same sign convention as the ELBO), not its negation.
inline Estimate importance_nll(const Dataset& data, const VaeParams& params, Activation act,
                               std::size_t samples, std::uint64_t seed) {
  if (data.empty()) throw DataError("importance_nll needs a non-empty dataset");
  Rng rng = substream(seed, "metrics/is");
  auto posteriors = encode_dataset(data, params.encoder, act);
  std::vector<double> per_example(data.count);
  for (std::size_t i = 0; i < data.count; ++i) {
    GaussianParams qi{row_range(posteriors.mean, i, i + 1), row_range(posteriors.logvar, i, i + 1)};
    Tensor xi = repeat_row(data.rows_tensor(i, i + 1), 0, samples);
    per_example[i] =
        importance_log_marginal(qi, [&](const Tensor& z) { return bernoulli_log_prob(decode(z, params.decoder, act), xi); },
                                samples, rng);
  }
  return mean_and_standard_error(per_example);
}

// ---------------------------------------------------------------------------
// ELBO on a held-out set
// ---------------------------------------------------------------------------

struct ElboEstimate {
  double elbo = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double standard_error = 0.0;
};

inline ElboEstimate evaluate_elbo(const Dataset& data, const VaeParams& params, Activation act,
                                  std::size_t n_samples, std::uint64_t seed, std::size_t batch_size = 500) {
  if (data.empty()) throw DataError("evaluate_elbo needs a non-empty dataset");
  Rng rng = substream(seed, "metrics/elbo");
  std::vector<double> rows;
  double recon = 0.0, kl = 0.0;
  for (std::size_t begin = 0; begin < data.count; begin += batch_size) {
    const std::size_t end = std::min(data.count, begin + batch_size);
    auto terms = elbo_batch(data.rows_tensor(begin, end), params, act, 1.0, n_samples, rng);
    const double w = static_cast<double>(end - begin);
    recon += terms.recon * w;
    kl += terms.kl * w;
    rows.insert(rows.end(), terms.per_example_elbo.values().begin(), terms.per_example_elbo.values().end());
  }
  auto est = mean_and_standard_error(rows);
  const double n = static_cast<double>(data.count);
  return {est.value, recon / n, kl / n, est.standard_error};
}

// ---------------------------------------------------------------------------
// Classification probe
// ---------------------------------------------------------------------------

struct ProbeConfig {
  std::size_t iterations = 500;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
};

inline constexpr int kProbeClasses = 10;

/// Multinomial logistic regression trained with full-batch Adam on centered
/// features; returns test accuracy.
inline double latent_probe(const Tensor& train_features, std::span<const int> train_labels,
                           const Tensor& test_features, std::span<const int> test_labels,
                           const ProbeConfig& config = {}) {
  auto check = [](const Tensor& f, std::span<const int> y, const char* what) {
    if (f.rank() != 2 || f.rows() != y.size() || y.empty()) {
      throw std::invalid_argument(std::string("latent_probe: ") + what + " features and labels disagree");
    }
    for (int l : y)
      if (l < 0 || l >= kProbeClasses) throw std::invalid_argument("latent_probe: label out of range 0..9");
    for (double v : f.values())
      if (!std::isfinite(v)) throw NumericError("latent_probe: non-finite feature");
  };
  check(train_features, train_labels, "train");
  check(test_features, test_labels, "test");
  if (train_features.cols() != test_features.cols()) throw ShapeError("latent_probe: train/test widths differ");

  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Index n = static_cast<Eigen::Index>(train_features.rows());
  const Eigen::Index d = static_cast<Eigen::Index>(train_features.cols());
  const Eigen::Index k = kProbeClasses;
  Mat x = detail::as_matrix(train_features.values(), train_features.rows(), train_features.cols());
  Eigen::RowVectorXd center = x.colwise().mean();
  x.rowwise() -= center;
  Mat y = Mat::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) y(i, train_labels[static_cast<std::size_t>(i)]) = 1.0;

  Mat w = Mat::Zero(d, k);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(k);
  Mat mw = Mat::Zero(d, k), vw = Mat::Zero(d, k);
  Eigen::RowVectorXd mb = Eigen::RowVectorXd::Zero(k), vb = Eigen::RowVectorXd::Zero(k);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (std::size_t t = 1; t <= config.iterations; ++t) {
    Mat logits = (x * w).rowwise() + b;
    Eigen::VectorXd mx = logits.rowwise().maxCoeff();
    Mat p = (logits.colwise() - mx).array().exp().matrix();
    Eigen::VectorXd z = p.rowwise().sum();
    p = p.array().colwise() / z.array();
    Mat g = (p - y) / static_cast<double>(n);
    Mat gw = x.transpose() * g;
    Eigen::RowVectorXd gb = g.colwise().sum();
    const double c1 = 1.0 - std::pow(b1, double(t)), c2 = 1.0 - std::pow(b2, double(t));
    mw = b1 * mw + (1 - b1) * gw;
    vw = b2 * vw + (1 - b2) * gw.cwiseProduct(gw);
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb + (1 - b2) * gb.cwiseProduct(gb);
    w.array() -= config.learning_rate * (mw.array() / c1) / ((vw.array() / c2).sqrt() + eps);
    b.array() -= config.learning_rate * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
  }

  Mat xt = detail::as_matrix(test_features.values(), test_features.rows(), test_features.cols());
  xt.rowwise() -= center;
  Mat logits = (xt * w).rowwise() + b;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (arg == test_labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test_labels.size());
}

// ---------------------------------------------------------------------------
// Full report
// ---------------------------------------------------------------------------

struct EvalConfig {
  bool kl = true;
  bool mi = true;
  bool au = true;
  bool importance = true;
  std::size_t mi_points = 2000;
  std::size_t mi_samples = 4;
  std::size_t is_samples = 200;
  std::size_t elbo_samples = 1;
  double au_threshold = 0.01;
  std::uint64_t seed = 0;
};

inline CollapseReport collapse_report(const std::string& model_id, const Checkpoint& ckpt, const Dataset& data,
                                      const EvalConfig& config) {
  if (data.empty()) throw DataError("evaluation dataset is empty");
  const Activation act = ckpt.model.activation;
  CollapseReport r;
  r.model_id = model_id;
  r.dim = ckpt.model.latent_dim;
  r.layers = ckpt.model.depth();
  r.n_eval = data.count;
  r.seed = config.seed;
  r.au_threshold = config.au_threshold;

  auto elbo = evaluate_elbo(data, ckpt.params, act, config.elbo_samples, config.seed);
  r.elbo = elbo.elbo;
  r.recon = elbo.recon;
  r.elbo_standard_error = elbo.standard_error;

  auto posteriors = encode_dataset(data, ckpt.params.encoder, act);
  r.kl_term = config.kl ? kl_term(posteriors) : elbo.kl;
  if (config.mi) {
    const std::size_t n = std::min(config.mi_points, data.count);
    auto mi = mutual_information(posteriors, n, config.mi_samples, config.seed);
    r.mi_estimate = mi.mi;
    r.mi_standard_error = mi.standard_error;
    r.n_mi_points = n;
    r.mi_samples_per_point = config.mi_samples;
  }
  if (config.au) {
    auto au = active_units(posteriors.mean, config.au_threshold);
    r.au_count = au.count;
    r.au_variances = std::move(au.variances);
  }
  if (config.importance) {
    auto is = importance_nll(data, ckpt.params, act, config.is_samples, config.seed);
    r.is_nll = is.value;
    r.is_standard_error = is.standard_error;
  }
  return r;
}

}  // namespace skipvae
