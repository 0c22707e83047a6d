// ELBO estimation, Adam, semi-amortized refinement and the training loop.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "skipvae/dataset.hpp"
#include "skipvae/distributions.hpp"
#include "skipvae/models.hpp"
#include "skipvae/rng.hpp"
#include "skipvae/tensor.hpp"

namespace skipvae {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 100;
  std::size_t epochs = 10;
  std::size_t kl_anneal_epochs = 0;  // 0 disables annealing
  std::size_t elbo_samples = 1;
  std::size_t refine_steps = 0;  // 0 disables semi-amortized refinement
  double refine_step_size = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (elbo_samples == 0) throw std::invalid_argument("elbo_samples must be positive");
    if (refine_steps > 0 && !(refine_step_size > 0.0)) throw std::invalid_argument("refine_step_size must be positive");
  }

  bool operator==(const TrainConfig&) const = default;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double elbo = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double kl_weight = 1.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  ModelConfig model;
  TrainConfig train;
  VaeParams params;
  std::uint64_t seed = 0;
  std::size_t epochs_completed = 0;
};

// ---------------------------------------------------------------------------
// ELBO
// ---------------------------------------------------------------------------

struct ElboTerms {
  Tensor objective;  // scalar: recon - kl_weight * kl, batch mean
  double elbo = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  Tensor per_example_elbo;  // weight-1 ELBO per row
};

/// Monte-Carlo reconstruction term (averaged over `n_samples` reparameterized
/// draws) minus the analytic KL.
inline ElboTerms elbo_batch(const Tensor& x, const VaeParams& params, Activation act, double kl_weight,
                            std::size_t n_samples, Rng& noise) {
  if (kl_weight < 0.0 || kl_weight > 1.0) throw std::invalid_argument("kl_weight must lie in [0, 1]");
  if (n_samples == 0) throw std::invalid_argument("n_samples must be positive");
  GaussianParams q = encode(x, params.encoder, act);
  Tensor recon_rows;
  for (std::size_t s = 0; s < n_samples; ++s) {
    Tensor z = reparam_sample(q, standard_normal(noise, q.mean.shape()));
    Tensor lp = bernoulli_log_prob(decode(z, params.decoder, act), x);
    recon_rows = s == 0 ? lp : add(recon_rows, lp);
  }
  if (n_samples > 1) recon_rows = scale(recon_rows, 1.0 / static_cast<double>(n_samples));
  Tensor kl_rows = gaussian_kl_to_prior(q);
  Tensor recon = mean(recon_rows, 0);
  Tensor kl = mean(kl_rows, 0);

  ElboTerms out;
  out.objective = kl_weight == 0.0 ? recon : sub(recon, scale(kl, kl_weight));
  out.recon = recon.item();
  out.kl = kl.item();
  out.elbo = out.recon - out.kl;
  out.per_example_elbo = sub(recon_rows.detached(), kl_rows.detached());
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
                      const AdamConfig& config) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = grads[k];
    if (g.shape() != p.shape() || state.m[k].size() != p.size()) {
      throw ShapeError("adam_step: gradient " + to_string(g.shape()) + " vs parameter " + to_string(p.shape()));
    }
    auto& m = state.m[k];
    auto& v = state.v[k];
    std::vector<double> next(p.values().begin(), p.values().end());
    auto gv = g.values();
    for (std::size_t i = 0; i < next.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gv[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gv[i] * gv[i];
      next[i] -= config.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.epsilon);
    }
    p = Tensor(p.shape(), std::move(next));
  }
}

// ---------------------------------------------------------------------------
// Semi-amortized refinement
// ---------------------------------------------------------------------------

/// Per-example ELBO as a function of the variational parameters and one
/// standard-normal noise draw (batch x D). Rows must be independent.
using PerExampleElbo = std::function<Tensor(const GaussianParams&, const Tensor& noise)>;

/// Reparameterized single-draw ELBO for a likelihood hook.
inline PerExampleElbo reparam_elbo(LogLikelihoodFn log_likelihood) {
  return [ll = std::move(log_likelihood)](const GaussianParams& q, const Tensor& noise) {
    return sub(ll(reparam_sample(q, noise)), gaussian_kl_to_prior(q));
  };
}

struct RefineConfig {
  std::size_t steps = 10;
  double step_size = 0.5;
  std::size_t eval_samples = 8;  // common random numbers for the acceptance test
  std::size_t max_halvings = 30;
};

struct RefineResult {
  GaussianParams params;
  std::vector<std::vector<double>> trace;  // trace[k][row], k = 0 .. steps
  bool aborted = false;                    // a non-finite value stopped refinement early
};

namespace detail {

inline std::vector<double> evaluate_rows(const PerExampleElbo& elbo, const GaussianParams& q,
                                         const std::vector<Tensor>& eval_noise) {
  std::vector<double> acc(q.batch(), 0.0);
  for (const auto& eps : eval_noise) {
    Tensor v = elbo(q, eps);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
  }
  for (auto& a : acc) a /= static_cast<double>(eval_noise.size());
  return acc;
}

inline void copy_row(std::vector<double>& dst, std::span<const double> src, std::size_t row, std::size_t dim) {
  std::copy_n(src.begin() + row * dim, dim, dst.begin() + row * dim);
}

}  // namespace detail

/// Gradient ascent on each row's ELBO with respect to (mean, logvar) only.
/// Each step takes a fresh single-draw gradient; a proposal is accepted only
/// if it does not lower the ELBO averaged over a fixed set of evaluation
/// draws, otherwise that row's step is halved and retried. The evaluated
/// ELBO trace is therefore non-decreasing per row.
inline RefineResult refine_variational(const GaussianParams& init, const PerExampleElbo& elbo,
                                       const RefineConfig& config, Rng& rng) {
  check_gaussian(init);
  if (config.steps == 0) throw std::invalid_argument("refine_variational needs at least one step");
  if (config.eval_samples == 0) throw std::invalid_argument("refine_variational needs evaluation samples");
  const std::size_t rows = init.batch(), dim = init.dim();
  const Shape shape{rows, dim};

  std::vector<Tensor> eval_noise;
  for (std::size_t s = 0; s < config.eval_samples; ++s) eval_noise.push_back(standard_normal(rng, shape));

  RefineResult result;
  result.params = init.detached();
  std::vector<double> current;
  try {
    current = detail::evaluate_rows(elbo, result.params, eval_noise);
  } catch (const NumericError&) {
    result.aborted = true;
    return result;
  }
  result.trace.push_back(current);

  for (std::size_t k = 0; k < config.steps; ++k) {
    Tensor grad_mean, grad_logvar;
    try {
      Tape tape;
      GaussianParams q{tape.variable(result.params.mean), tape.variable(result.params.logvar)};
      Tensor total = sum(elbo(q, standard_normal(rng, shape)), 0);
      auto grads = tape.backward(total);
      grad_mean = grads.of(q.mean);
      grad_logvar = grads.of(q.logvar);
    } catch (const NumericError&) {
      result.aborted = true;
      return result;
    }

    std::vector<double> step(rows, config.step_size);
    std::vector<bool> pending(rows, true);
    std::vector<double> mean(result.params.mean.values().begin(), result.params.mean.values().end());
    std::vector<double> logvar(result.params.logvar.values().begin(), result.params.logvar.values().end());
    const auto base_mean = mean;
    const auto base_logvar = logvar;

    auto propose = [&](std::size_t i) {
      for (std::size_t d = 0; d < dim; ++d) {
        const std::size_t j = i * dim + d;
        mean[j] = base_mean[j] + step[i] * grad_mean[j];
        logvar[j] = std::clamp(base_logvar[j] + step[i] * grad_logvar[j], kLogvarMin, kLogvarMax);
      }
    };
    auto restore = [&](std::size_t i) {
      detail::copy_row(mean, base_mean, i, dim);
      detail::copy_row(logvar, base_logvar, i, dim);
    };
    for (std::size_t i = 0; i < rows; ++i) propose(i);

    for (std::size_t attempt = 0; attempt <= config.max_halvings; ++attempt) {
      std::vector<double> candidate;
      GaussianParams q{Tensor(shape, mean), Tensor(shape, logvar)};
      bool finite = true;
      try {
        candidate = detail::evaluate_rows(elbo, q, eval_noise);
      } catch (const NumericError&) {
        finite = false;
      }
      bool any_pending = false;
      for (std::size_t i = 0; i < rows; ++i) {
        if (!pending[i]) continue;
        if (finite && std::isfinite(candidate[i]) && candidate[i] >= current[i]) {
          pending[i] = false;
          current[i] = candidate[i];
          continue;
        }
        if (attempt == config.max_halvings) {
          restore(i);
          pending[i] = false;
          continue;
        }
        step[i] *= 0.5;
        propose(i);
        any_pending = true;
      }
      if (!any_pending) break;
    }
    // A non-finite batch evaluation rejects every pending row; rows accepted
    // on earlier attempts keep their proposal and value.
    result.params = {Tensor(shape, std::move(mean)), Tensor(shape, std::move(logvar))};
    result.trace.push_back(current);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, Checkpoint last_good, std::size_t epoch, std::size_t batch)
      : NumericError(what), last_good_(std::move(last_good)), epoch_(epoch), batch_(batch) {}
  const Checkpoint& last_good() const { return last_good_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  Checkpoint last_good_;
  std::size_t epoch_, batch_;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainHistory history;
};

struct TrainCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
};

/// KL weight at a global optimizer step: linear from 0 to 1 over the
/// annealing epochs, then exactly 1.
inline double kl_weight_at(std::size_t step, std::size_t steps_per_epoch, std::size_t anneal_epochs) {
  if (anneal_epochs == 0) return 1.0;
  const double ramp = static_cast<double>(anneal_epochs * steps_per_epoch);
  return std::min(1.0, static_cast<double>(step) / ramp);
}

inline std::vector<Tensor*> parameter_pointers(VaeParams& params) {
  std::vector<Tensor*> out;
  for_each_parameter(params, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

inline std::vector<Tensor> gradients_for(const VaeParams& bound, const Gradients& grads) {
  std::vector<Tensor> out;
  for_each_parameter(bound, [&](const std::string&, const Tensor& t) { out.push_back(grads.of(t)); });
  return out;
}

inline std::string parameter_norm_report(const VaeParams& params) {
  std::ostringstream os;
  for_each_parameter(params, [&](const std::string& name, const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) s += v * v;
    os << "  " << name << ": " << std::sqrt(s) << "\n";
  });
  return os.str();
}

namespace detail {

// One semi-amortized step objective: the encoder term is the ELBO at the
// encoder's own output with the decoder held constant; the decoder term is
// the reconstruction at the refined posterior with the encoder held constant.
inline ElboTerms semi_amortized_objective(const Tensor& x, const VaeParams& bound, const VaeParams& frozen,
                                          Activation act, double kl_weight, std::size_t n_samples,
                                          const RefineConfig& refine, Rng& noise, Rng& refine_rng) {
  VaeParams encoder_side{bound.encoder, frozen.decoder};
  ElboTerms enc = elbo_batch(x, encoder_side, act, kl_weight, n_samples, noise);

  GaussianParams q0 = encode(x, frozen.encoder, act);
  auto refined = refine_variational(q0, reparam_elbo(bernoulli_decoder_likelihood(x, frozen.decoder, act)),
                                    refine, refine_rng);
  Tensor recon_rows;
  for (std::size_t s = 0; s < n_samples; ++s) {
    Tensor z = reparam_sample(refined.params, standard_normal(noise, q0.mean.shape()));
    Tensor lp = bernoulli_log_prob(decode(z, bound.decoder, act), x);
    recon_rows = s == 0 ? lp : add(recon_rows, lp);
  }
  if (n_samples > 1) recon_rows = scale(recon_rows, 1.0 / static_cast<double>(n_samples));
  Tensor kl_rows = gaussian_kl_to_prior(refined.params);
  Tensor dec_recon = mean(recon_rows, 0);

  ElboTerms out;
  out.objective = add(enc.objective, dec_recon);
  out.recon = dec_recon.item();
  out.kl = mean(kl_rows, 0).item();
  out.elbo = out.recon - out.kl;
  out.per_example_elbo = sub(recon_rows.detached(), kl_rows);
  return out;
}

}  // namespace detail

/// Shuffled minibatch Adam on the negative ELBO.
inline TrainResult train(const Dataset& data, const ModelConfig& model, const TrainConfig& config,
                         const TrainCallbacks& callbacks = {}) {
  if (data.empty()) throw DataError("training dataset is empty");
  model.validate();
  config.validate();
  if (data.dim != model.data_dim) {
    throw DataError("dataset has " + std::to_string(data.dim) + " pixels but the model expects " +
                    std::to_string(model.data_dim));
  }

  TrainResult result;
  Checkpoint& ckpt = result.checkpoint;
  ckpt.model = model;
  ckpt.train = config;
  ckpt.seed = config.seed;
  ckpt.params = init_params(model, config.seed);
  if (config.epochs == 0) return result;

  Rng shuffle_rng = substream(config.seed, streams::shuffle);
  Rng noise_rng = substream(config.seed, streams::elbo_noise);
  Rng refine_rng = substream(config.seed, streams::refine);
  AdamState adam;
  const AdamConfig adam_config{config.learning_rate};
  const RefineConfig refine_config{config.refine_steps, config.refine_step_size};
  const std::size_t n = data.count;
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  std::vector<std::size_t> order(n);
  std::size_t global_step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double elbo_sum = 0.0, recon_sum = 0.0, kl_sum = 0.0, weight = 1.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(n, begin + config.batch_size);
      Tensor x = data.batch(std::span(order).subspan(begin, end - begin));
      weight = kl_weight_at(global_step, steps_per_epoch, config.kl_anneal_epochs);
      try {
        Tape tape;
        VaeParams bound = bind(ckpt.params, tape);
        ElboTerms terms =
            config.refine_steps > 0
                ? detail::semi_amortized_objective(x, bound, ckpt.params, model.activation, weight,
                                                   config.elbo_samples, refine_config, noise_rng, refine_rng)
                : elbo_batch(x, bound, model.activation, weight, config.elbo_samples, noise_rng);
        auto grads = tape.backward(neg(terms.objective));
        auto grad_list = gradients_for(bound, grads);
        for (const auto& g : grad_list) detail::check_finite(g.storage(), "gradient");
        VaeParams next = ckpt.params;
        adam_step(parameter_pointers(next), grad_list, adam, adam_config);
        for_each_parameter(next, [](const std::string&, const Tensor& t) {
          detail::check_finite(t.storage(), "parameter update");
        });
        ckpt.params = std::move(next);
        const double rows = static_cast<double>(end - begin);
        elbo_sum += terms.elbo * rows;
        recon_sum += terms.recon * rows;
        kl_sum += terms.kl * rows;
      } catch (const NumericError& e) {
        std::ostringstream os;
        os << "numeric abort at epoch " << epoch << ", batch " << b << ": " << e.what()
           << "\nparameter norms:\n"
           << parameter_norm_report(ckpt.params);
        throw TrainingAborted(os.str(), ckpt, epoch, b);
      }
      ++global_step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.elbo = elbo_sum / static_cast<double>(n);
    rec.recon = recon_sum / static_cast<double>(n);
    rec.kl = kl_sum / static_cast<double>(n);
    rec.kl_weight = weight;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.epochs.push_back(rec);
    ckpt.epochs_completed = epoch + 1;
    if (callbacks.on_epoch) callbacks.on_epoch(rec);
  }
  return result;
}

}  // namespace skipvae
