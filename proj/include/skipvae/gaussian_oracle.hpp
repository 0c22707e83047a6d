// Linear-Gaussian chains z -> h -> x (optionally with a direct z -> x path)
// where posteriors, marginals and mutual information are available in
// closed form.
//
//   z ~ N(0, I),  h = B z + e_h,  x = C h + D_skip z + e_x,
//   e_h ~ N(0, s_h I),  e_x ~ N(0, s_x I).
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/QR>

#include "skipvae/distributions.hpp"
#include "skipvae/metrics.hpp"
#include "skipvae/models.hpp"
#include "skipvae/rng.hpp"
#include "skipvae/tensor.hpp"
#include "skipvae/training.hpp"

namespace skipvae {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class SingularCovarianceError : public NumericError {
 public:
  using NumericError::NumericError;
};

struct LinearGaussianModel {
  Matrix B;        // d_h x D
  Matrix C;        // d_x x d_h
  Matrix D_skip;   // d_x x D, zero for the plain chain
  double s_h = 1.0;  // hidden noise variance
  double s_x = 1.0;  // observation noise variance

  Eigen::Index latent_dim() const { return B.cols(); }
  Eigen::Index hidden_dim() const { return B.rows(); }
  Eigen::Index data_dim() const { return C.rows(); }

  /// Total linear map z -> x.
  Matrix A() const { return C * B + D_skip; }
  /// Covariance of x given z.
  Matrix noise_cov() const {
    return s_h * C * C.transpose() + s_x * Matrix::Identity(data_dim(), data_dim());
  }

  LinearGaussianModel plain() const {
    LinearGaussianModel m = *this;
    m.D_skip.setZero();
    return m;
  }

  void validate() const {
    if (B.size() == 0 || C.size() == 0) throw std::invalid_argument("linear-Gaussian model needs non-empty B and C");
    if (C.cols() != B.rows()) throw ShapeError("linear-Gaussian model: C columns must equal B rows");
    if (D_skip.rows() != C.rows() || D_skip.cols() != B.cols()) {
      throw ShapeError("linear-Gaussian model: D_skip must be d_x x D");
    }
    if (!(s_h > 0.0) || !(s_x > 0.0)) throw std::invalid_argument("noise variances must be positive");
    if (!B.allFinite() || !C.allFinite() || !D_skip.allFinite()) throw NumericError("non-finite model matrix");
  }
};

inline LinearGaussianModel make_chain(Matrix B, Matrix C, double s_h, double s_x) {
  LinearGaussianModel m;
  m.D_skip = Matrix::Zero(C.rows(), B.cols());
  m.B = std::move(B);
  m.C = std::move(C);
  m.s_h = s_h;
  m.s_x = s_x;
  m.validate();
  return m;
}

namespace detail {

inline constexpr double kJitter = 1e-12;

inline Eigen::LLT<Matrix> factor(const Matrix& s) {
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() == Eigen::Success) return llt;
  Matrix jittered = s;
  jittered.diagonal().array() += kJitter;
  llt.compute(jittered);
  if (llt.info() != Eigen::Success) {
    throw SingularCovarianceError("covariance matrix is not positive definite (" + std::to_string(s.rows()) + "x" +
                                  std::to_string(s.cols()) + ")");
  }
  return llt;
}

inline double log_det(const Matrix& s) {
  auto llt = factor(s);
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline Tensor to_tensor(const Matrix& m) {
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  return Tensor::matrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()), std::move(v));
}

inline Matrix to_matrix(const Tensor& t) {
  Matrix m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(Eigen::Index(r), Eigen::Index(c)) = t.at(r, c);
  return m;
}

inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace detail

/// Joint covariance of (z, h, x), blocks in that order.
inline Matrix joint_covariance(const LinearGaussianModel& m) {
  m.validate();
  const Eigen::Index d = m.latent_dim(), dh = m.hidden_dim(), dx = m.data_dim();
  const Matrix a = m.A();
  const Matrix shh = m.B * m.B.transpose() + m.s_h * Matrix::Identity(dh, dh);
  Matrix s(d + dh + dx, d + dh + dx);
  s.block(0, 0, d, d).setIdentity();
  s.block(0, d, d, dh) = m.B.transpose();
  s.block(0, d + dh, d, dx) = a.transpose();
  s.block(d, d, dh, dh) = shh;
  s.block(d, d + dh, dh, dx) = shh * m.C.transpose() + m.B * m.D_skip.transpose();
  s.block(d + dh, d + dh, dx, dx) = a * a.transpose() + m.noise_cov();
  s.triangularView<Eigen::StrictlyLower>() = s.transpose();
  return s;
}

enum class VariablePair { xz, hz, xh };

inline std::string to_string(VariablePair p) {
  switch (p) {
    case VariablePair::xz: return "x,z";
    case VariablePair::hz: return "h,z";
    case VariablePair::xh: return "x,h";
  }
  return "?";
}

/// I(a; b) = 0.5 * (ln det S_a + ln det S_b - ln det S_ab).
inline double exact_mi(const LinearGaussianModel& m, VariablePair pair = VariablePair::xz) {
  const Matrix s = joint_covariance(m);
  const Eigen::Index d = m.latent_dim(), dh = m.hidden_dim(), dx = m.data_dim();
  struct Block { Eigen::Index start, size; };
  const Block z{0, d}, h{d, dh}, x{d + dh, dx};
  Block a{}, b{};
  switch (pair) {
    case VariablePair::xz: a = x; b = z; break;
    case VariablePair::hz: a = h; b = z; break;
    case VariablePair::xh: a = x; b = h; break;
  }
  const Matrix saa = s.block(a.start, a.start, a.size, a.size);
  const Matrix sbb = s.block(b.start, b.start, b.size, b.size);
  Matrix joint(a.size + b.size, a.size + b.size);
  joint.block(0, 0, a.size, a.size) = saa;
  joint.block(a.size, a.size, b.size, b.size) = sbb;
  joint.block(0, a.size, a.size, b.size) = s.block(a.start, b.start, a.size, b.size);
  joint.block(a.size, 0, b.size, a.size) = s.block(b.start, a.start, b.size, a.size);
  const double mi = 0.5 * (detail::log_det(saa) + detail::log_det(sbb) - detail::log_det(joint));
  return std::max(mi, 0.0);
}

struct GaussianPosterior {
  Vector mean;
  Matrix cov;
};

/// p(z | x): precision I + A^T N^-1 A, mean cov A^T N^-1 x.
inline GaussianPosterior exact_posterior(const LinearGaussianModel& m, const Vector& x) {
  m.validate();
  if (x.size() != m.data_dim()) throw ShapeError("exact_posterior: x has the wrong length");
  const Matrix a = m.A();
  auto noise = detail::factor(m.noise_cov());
  const Matrix precision = Matrix::Identity(m.latent_dim(), m.latent_dim()) + a.transpose() * noise.solve(a);
  auto p = detail::factor(precision);
  GaussianPosterior out;
  out.cov = p.solve(Matrix::Identity(m.latent_dim(), m.latent_dim()));
  out.mean = out.cov * (a.transpose() * noise.solve(x));
  return out;
}

/// Marginal covariance of x.
inline Matrix marginal_cov(const LinearGaussianModel& m) {
  const Matrix a = m.A();
  return a * a.transpose() + m.noise_cov();
}

inline double exact_log_marginal(const LinearGaussianModel& m, const Vector& x) {
  m.validate();
  if (x.size() != m.data_dim()) throw ShapeError("exact_log_marginal: x has the wrong length");
  auto llt = detail::factor(marginal_cov(m));
  const Vector w = llt.matrixL().solve(x);
  const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * (w.squaredNorm() + log_det + static_cast<double>(x.size()) * kLogTwoPi);
}

/// n draws of x (rows), with the latent draws returned through `z` if given.
inline Matrix sample_x(const LinearGaussianModel& m, std::size_t n, Rng& rng, Matrix* z = nullptr) {
  m.validate();
  const auto rows = static_cast<Eigen::Index>(n);
  Matrix zs = detail::gaussian_matrix(rows, m.latent_dim(), rng);
  Matrix h = zs * m.B.transpose() + std::sqrt(m.s_h) * detail::gaussian_matrix(rows, m.hidden_dim(), rng);
  Matrix x = h * m.C.transpose() + zs * m.D_skip.transpose() +
             std::sqrt(m.s_x) * detail::gaussian_matrix(rows, m.data_dim(), rng);
  if (z) *z = std::move(zs);
  return x;
}

// ---------------------------------------------------------------------------
// Hooks into the variational machinery
// ---------------------------------------------------------------------------

/// log p(x | z) per row for a fixed batch of observations, differentiable in z.
inline LogLikelihoodFn gaussian_likelihood(const Matrix& x, const LinearGaussianModel& m) {
  m.validate();
  auto noise = detail::factor(m.noise_cov());
  const Matrix l_inv = noise.matrixL().solve(Matrix::Identity(m.data_dim(), m.data_dim()));
  const double log_det = 2.0 * noise.matrixLLT().diagonal().array().log().sum();
  const double constant = -0.5 * (log_det + static_cast<double>(m.data_dim()) * kLogTwoPi);
  Tensor xt = detail::to_tensor(x);
  Tensor at = detail::to_tensor(Matrix(m.A().transpose()));
  Tensor wt = detail::to_tensor(Matrix(l_inv.transpose()));
  return [xt, at, wt, constant](const Tensor& z) {
    if (z.rows() != xt.rows()) throw ShapeError("gaussian_likelihood: latent batch does not match observations");
    Tensor r = matmul(sub(xt, matmul(z, at)), wt);
    return add_scalar(scale(sum(square(r), 1), -0.5), constant);
  };
}

/// Closed-form ELBO per row for a diagonal Gaussian q; the noise argument is
/// ignored, so refinement on it is deterministic.
inline PerExampleElbo analytic_elbo(const Matrix& x, const LinearGaussianModel& m) {
  auto ll = gaussian_likelihood(x, m);
  auto noise = detail::factor(m.noise_cov());
  const Matrix a = m.A();
  const Matrix g = a.transpose() * noise.solve(a);
  std::vector<double> diag(static_cast<std::size_t>(g.rows()));
  for (Eigen::Index d = 0; d < g.rows(); ++d) diag[static_cast<std::size_t>(d)] = g(d, d);
  Tensor g_diag = Tensor::vector(std::move(diag));
  return [ll, g_diag](const GaussianParams& q, const Tensor&) {
    Tensor spread = scale(sum(mul(exp(q.logvar), g_diag), 1), -0.5);
    return sub(add(ll(q.mean), spread), gaussian_kl_to_prior(q));
  };
}

/// Diagonal Gaussian q for each row of x: the exact posterior mean and the
/// marginal posterior variances. Exact when the posterior covariance is
/// diagonal.
inline GaussianParams diagonal_posterior(const LinearGaussianModel& m, const Matrix& x) {
  m.validate();
  const Matrix a = m.A();
  auto noise = detail::factor(m.noise_cov());
  const Matrix precision = Matrix::Identity(m.latent_dim(), m.latent_dim()) + a.transpose() * noise.solve(a);
  const Matrix cov = detail::factor(precision).solve(Matrix::Identity(m.latent_dim(), m.latent_dim()));
  const Matrix means = x * (cov * a.transpose() * noise.solve(Matrix::Identity(m.data_dim(), m.data_dim()))).transpose();
  Matrix logvar(x.rows(), m.latent_dim());
  for (Eigen::Index i = 0; i < x.rows(); ++i) logvar.row(i) = cov.diagonal().array().log().transpose();
  return {detail::to_tensor(means), detail::to_tensor(logvar)};
}

/// Diagonal Gaussian q minimizing KL(q || p(z|x)) within the diagonal family:
/// exact mean, variance 1 / precision_dd. This is the stationary point of the
/// analytic ELBO.
inline GaussianParams optimal_diagonal_posterior(const LinearGaussianModel& m, const Matrix& x) {
  GaussianParams q = diagonal_posterior(m, x);
  const Matrix a = m.A();
  auto noise = detail::factor(m.noise_cov());
  const Matrix precision = Matrix::Identity(m.latent_dim(), m.latent_dim()) + a.transpose() * noise.solve(a);
  Matrix logvar(x.rows(), m.latent_dim());
  for (Eigen::Index i = 0; i < x.rows(); ++i) logvar.row(i) = (-precision.diagonal().array().log()).transpose();
  return {q.mean, detail::to_tensor(logvar)};
}

// ---------------------------------------------------------------------------
// Model builders
// ---------------------------------------------------------------------------

struct RandomModelSpec {
  std::size_t max_dim = 8;
  double noise_min = 0.1;
  double noise_max = 2.0;
};

/// Dimensions uniform on 1..max_dim, B and C entries N(0, 1), noise variances
/// uniform on [noise_min, noise_max]; D_skip = 0.
inline LinearGaussianModel random_chain(Rng& rng, const RandomModelSpec& spec = {}) {
  std::uniform_int_distribution<std::size_t> dim(1, spec.max_dim);
  std::uniform_real_distribution<double> noise(spec.noise_min, spec.noise_max);
  const auto d = static_cast<Eigen::Index>(dim(rng));
  const auto dh = static_cast<Eigen::Index>(dim(rng));
  const auto dx = static_cast<Eigen::Index>(dim(rng));
  Matrix b = detail::gaussian_matrix(dh, d, rng);
  Matrix c = detail::gaussian_matrix(dx, dh, rng);
  const double s_h = noise(rng);
  const double s_x = noise(rng);
  return make_chain(std::move(b), std::move(c), s_h, s_x);
}

inline Matrix random_orthogonal(Eigen::Index n, Rng& rng) {
  Eigen::HouseholderQR<Matrix> qr(detail::gaussian_matrix(n, n, rng));
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < n; ++i)
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  return q;
}

/// Chain with d_x = d_h = D whose posterior covariance is diagonal: B = diag(b),
/// C = Q diag(c) with Q orthogonal. Dimension d has signal-to-noise ratio
/// snr[d] = c_d^2 b_d^2 / (s_h c_d^2 + s_x), and I(x, z) = 0.5 * sum ln(1 + snr).
inline LinearGaussianModel diagonal_posterior_chain(const std::vector<double>& snr, Rng& rng, double s_h = 0.5,
                                                    double s_x = 1.0) {
  if (snr.empty()) throw std::invalid_argument("diagonal_posterior_chain needs at least one dimension");
  const auto d = static_cast<Eigen::Index>(snr.size());
  std::uniform_real_distribution<double> scale_c(0.5, 2.0);
  Vector b(d), c(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    if (!(snr[static_cast<std::size_t>(i)] >= 0.0)) throw std::invalid_argument("snr must be non-negative");
    c(i) = scale_c(rng);
    b(i) = std::sqrt(snr[static_cast<std::size_t>(i)] * (s_h * c(i) * c(i) + s_x)) / c(i);
  }
  Matrix q = random_orthogonal(d, rng);
  return make_chain(Matrix(b.asDiagonal()), q * c.asDiagonal(), s_h, s_x);
}

// ---------------------------------------------------------------------------
// Ordering of I(x, z) between plain and skip chains
// ---------------------------------------------------------------------------

struct Theorem1Row {
  std::size_t config_id = 0;
  double i_plain = 0.0;
  double i_skip = 0.0;
  double margin = 0.0;  // i_skip - i_plain
  bool holds = true;
};

/// Exact I(x, z) of `base` and of base with each D_skip in turn, noise fixed.
inline std::vector<Theorem1Row> theorem1_check(const LinearGaussianModel& base, const std::vector<Matrix>& skips,
                                               std::size_t first_id = 0) {
  if (!base.D_skip.isZero(0.0)) throw std::invalid_argument("theorem1_check: base model must have D_skip = 0");
  const double plain = exact_mi(base);
  std::vector<Theorem1Row> rows;
  for (std::size_t k = 0; k < skips.size(); ++k) {
    LinearGaussianModel skip = base;
    skip.D_skip = skips[k];
    const double i_skip = exact_mi(skip);
    rows.push_back({first_id + k, plain, i_skip, i_skip - plain, i_skip >= plain});
  }
  return rows;
}

enum class SkipDraw {
  gaussian,  // D_skip entries N(0, 1)
  aligned,   // D_skip = alpha * C B with alpha uniform on [0.1, 2]
};

/// `configs` seeded random chains, each paired with one random D_skip.
inline std::vector<Theorem1Row> theorem1_sweep(std::size_t configs, std::uint64_t seed,
                                               SkipDraw draw = SkipDraw::gaussian,
                                               const RandomModelSpec& spec = {}) {
  Rng rng = substream(seed, "oracle/theorem1");
  std::uniform_real_distribution<double> alpha(0.1, 2.0);
  std::vector<Theorem1Row> rows;
  for (std::size_t k = 0; k < configs; ++k) {
    LinearGaussianModel base = random_chain(rng, spec);
    Matrix skip = draw == SkipDraw::gaussian ? detail::gaussian_matrix(base.data_dim(), base.latent_dim(), rng)
                                             : Matrix(alpha(rng) * base.C * base.B);
    auto r = theorem1_check(base, {skip}, k);
    rows.push_back(r.front());
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Estimator validation against the closed form
// ---------------------------------------------------------------------------

struct MiValidationRow {
  std::size_t model_id = 0;
  std::size_t latent_dim = 0;
  double exact = 0.0;
  double estimate = 0.0;
  double standard_error = 0.0;
  double error = 0.0;
  double tolerance = 0.0;
  bool pass = true;
};

struct MiValidationConfig {
  std::size_t models = 10;
  std::size_t points = 2000;
  std::size_t samples = 4;
  double min_tolerance = 0.05;
  double se_multiplier = 3.0;
  std::size_t max_dim = 4;
  double snr_min = 0.2;
  double snr_max = 3.0;
};

/// Draws a diagonal-posterior chain, samples x, encodes with the exact
/// posterior and compares the Monte-Carlo MI estimate with exact_mi.
inline MiValidationRow validate_mi_estimator(std::size_t model_id, std::uint64_t seed,
                                             const MiValidationConfig& config) {
  Rng rng = substream(seed ^ splitmix64(model_id + 1), "oracle/mi-model");
  std::uniform_int_distribution<std::size_t> dim(1, config.max_dim);
  std::uniform_real_distribution<double> snr_draw(config.snr_min, config.snr_max);
  std::vector<double> snr(dim(rng));
  for (auto& s : snr) s = snr_draw(rng);
  LinearGaussianModel m = diagonal_posterior_chain(snr, rng);
  Matrix x = sample_x(m, config.points, rng);
  GaussianParams q = diagonal_posterior(m, x);
  auto est = mutual_information(q, config.points, config.samples, seed + model_id);

  MiValidationRow row;
  row.model_id = model_id;
  row.latent_dim = snr.size();
  row.exact = exact_mi(m);
  row.estimate = est.mi;
  row.standard_error = est.standard_error;
  row.error = est.mi - row.exact;
  row.tolerance = std::max(config.se_multiplier * est.standard_error, config.min_tolerance);
  row.pass = std::abs(row.error) <= row.tolerance;
  return row;
}

inline std::vector<MiValidationRow> validate_mi_estimator(std::uint64_t seed, const MiValidationConfig& config) {
  std::vector<MiValidationRow> rows;
  for (std::size_t k = 0; k < config.models; ++k) rows.push_back(validate_mi_estimator(k, seed, config));
  return rows;
}

}  // namespace skipvae
