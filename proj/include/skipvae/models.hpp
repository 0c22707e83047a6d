// Encoder and the two decoder families.
//
// Plain decoder: h1 = act(z T0), h(l+1) = act(h(l) Tl), logits = h(L) TL.
// Skip decoder:  h1 = act(z T0), h(l+1) = act(h(l) Tl Wh_l + z Wz_l + c_l),
//                logits = h(L) TL Wh_L + z Wz_L + c_L.
// Row-vector convention throughout: y = x W + b with W stored in x out.
#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "skipvae/distributions.hpp"
#include "skipvae/rng.hpp"
#include "skipvae/tensor.hpp"

namespace skipvae {

enum class Activation { relu, tanh, linear };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::linear: return "linear";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "linear") return Activation::linear;
  throw std::invalid_argument("unknown activation '" + s + "' (expected relu, tanh or linear)");
}

inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::relu: return relu(x);
    case Activation::tanh: return tanh(x);
    case Activation::linear: return x;
  }
  return x;
}

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

struct ModelConfig {
  std::size_t latent_dim = 50;
  std::size_t data_dim = 784;
  std::vector<std::size_t> encoder_widths{512, 512};
  std::vector<std::size_t> decoder_widths{512, 512};
  bool skip_enabled = false;
  Activation activation = Activation::relu;

  std::size_t depth() const { return decoder_widths.size(); }

  void validate() const {
    if (latent_dim == 0 || data_dim == 0) throw std::invalid_argument("latent_dim and data_dim must be positive");
    if (decoder_widths.empty()) throw std::invalid_argument("decoder needs at least one hidden layer");
    for (auto w : encoder_widths)
      if (w == 0) throw std::invalid_argument("encoder widths must be positive");
    for (auto w : decoder_widths)
      if (w == 0) throw std::invalid_argument("decoder widths must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct Affine {
  Tensor weight;  // in x out
  Tensor bias;    // out
};

inline Tensor apply(const Affine& layer, const Tensor& x) { return add(matmul(x, layer.weight), layer.bias); }

struct SkipWeights {
  Tensor w_h;   // W x W
  Tensor w_z;   // D x W
  Tensor bias;  // W
};

struct EncoderParams {
  std::vector<Affine> hidden;
  Affine mean;
  Affine logvar;
};

/// theta_0 .. theta_L; `skips` holds W_1 .. W_L and is empty for a plain decoder.
struct DecoderParams {
  std::vector<Affine> layers;
  std::vector<SkipWeights> skips;

  bool has_skips() const { return !skips.empty(); }
};

struct VaeParams {
  EncoderParams encoder;
  DecoderParams decoder;
};

// Visits every parameter tensor in a fixed order with its canonical name.
template <class Params, class Fn>
void for_each_parameter(Params& params, Fn&& fn) {
  auto& enc = params.encoder;
  for (std::size_t i = 0; i < enc.hidden.size(); ++i) {
    fn("encoder." + std::to_string(i) + ".weight", enc.hidden[i].weight);
    fn("encoder." + std::to_string(i) + ".bias", enc.hidden[i].bias);
  }
  fn(std::string("encoder.mean.weight"), enc.mean.weight);
  fn(std::string("encoder.mean.bias"), enc.mean.bias);
  fn(std::string("encoder.logvar.weight"), enc.logvar.weight);
  fn(std::string("encoder.logvar.bias"), enc.logvar.bias);
  auto& dec = params.decoder;
  for (std::size_t i = 0; i < dec.layers.size(); ++i) {
    fn("decoder." + std::to_string(i) + ".weight", dec.layers[i].weight);
    fn("decoder." + std::to_string(i) + ".bias", dec.layers[i].bias);
  }
  for (std::size_t i = 0; i < dec.skips.size(); ++i) {
    const auto l = std::to_string(i + 1);
    fn("skip." + l + ".w_h", dec.skips[i].w_h);
    fn("skip." + l + ".w_z", dec.skips[i].w_z);
    fn("skip." + l + ".bias", dec.skips[i].bias);
  }
}

template <class Fn>
void for_each_parameter(DecoderParams& dec, Fn&& fn) {
  for (auto& l : dec.layers) {
    fn(l.weight);
    fn(l.bias);
  }
  for (auto& s : dec.skips) {
    fn(s.w_h);
    fn(s.w_z);
    fn(s.bias);
  }
}

inline std::size_t parameter_count(const VaeParams& params) {
  std::size_t n = 0;
  for_each_parameter(params, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

inline std::size_t parameter_count(const DecoderParams& dec) {
  std::size_t n = 0;
  auto copy = dec;
  for_each_parameter(copy, [&](Tensor& t) { n += t.size(); });
  return n;
}

/// Registers every parameter as a leaf on `tape`.
inline VaeParams bind(const VaeParams& params, Tape& tape) {
  VaeParams bound = params;
  for_each_parameter(bound, [&](const std::string&, Tensor& t) { t = tape.variable(t); });
  return bound;
}

inline DecoderParams bind(const DecoderParams& dec, Tape& tape) {
  DecoderParams bound = dec;
  for_each_parameter(bound, [&](Tensor& t) { t = tape.variable(t); });
  return bound;
}

namespace detail {

inline Affine init_affine(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(in * out);
  for (auto& v : w) v = dist(rng);
  return {Tensor::matrix(in, out, std::move(w)), Tensor::zeros({out})};
}

inline Tensor init_weight(std::size_t in, std::size_t out, Rng& rng) { return init_affine(in, out, rng).weight; }

}  // namespace detail

/// Scaled-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases.
inline VaeParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = substream(seed, streams::init);
  VaeParams p;
  std::size_t in = config.data_dim;
  for (auto w : config.encoder_widths) {
    p.encoder.hidden.push_back(detail::init_affine(in, w, rng));
    in = w;
  }
  p.encoder.mean = detail::init_affine(in, config.latent_dim, rng);
  p.encoder.logvar = detail::init_affine(in, config.latent_dim, rng);

  in = config.latent_dim;
  for (auto w : config.decoder_widths) {
    p.decoder.layers.push_back(detail::init_affine(in, w, rng));
    in = w;
  }
  p.decoder.layers.push_back(detail::init_affine(in, config.data_dim, rng));

  if (config.skip_enabled) {
    for (std::size_t l = 1; l <= config.depth(); ++l) {
      const std::size_t width = l < config.depth() ? config.decoder_widths[l] : config.data_dim;
      SkipWeights s;
      s.w_h = detail::init_weight(width, width, rng);
      s.w_z = detail::init_weight(config.latent_dim, width, rng);
      s.bias = Tensor::zeros({width});
      p.decoder.skips.push_back(std::move(s));
    }
  }
  return p;
}

/// Posterior parameters for a batch x P input; logvar is clamped to [-10, 10].
inline GaussianParams encode(const Tensor& x, const EncoderParams& enc, Activation act) {
  const std::size_t in = enc.hidden.empty() ? enc.mean.weight.rows() : enc.hidden.front().weight.rows();
  if (x.rank() != 2 || x.cols() != in) {
    throw ShapeError("encode: input " + to_string(x.shape()) + " does not match encoder width " +
                     std::to_string(in));
  }
  Tensor h = x;
  for (const auto& layer : enc.hidden) h = activate(apply(layer, h), act);
  return {apply(enc.mean, h), clamp(apply(enc.logvar, h), kLogvarMin, kLogvarMax)};
}

inline void check_latent(const Tensor& z, const DecoderParams& dec) {
  if (dec.layers.size() < 2) throw std::invalid_argument("decoder needs theta_0 .. theta_L with L >= 1");
  if (z.rank() != 2 || z.cols() != dec.layers.front().weight.rows()) {
    throw ShapeError("decode: latent " + to_string(z.shape()) + " does not match decoder input width " +
                     std::to_string(dec.layers.front().weight.rows()));
  }
}

inline Tensor decode_plain(const Tensor& z, const DecoderParams& dec, Activation act) {
  check_latent(z, dec);
  const std::size_t last = dec.layers.size() - 1;
  Tensor h = z;
  for (std::size_t l = 0; l < last; ++l) h = activate(apply(dec.layers[l], h), act);
  return apply(dec.layers[last], h);
}

/// g(h_out, z) = act(h_out W_h + z W_z + bias); the activation is skipped
/// on the output layer.
inline Tensor skip_combine(const Tensor& h_out, const Tensor& z, const SkipWeights& w, bool is_last,
                           Activation act) {
  if (h_out.rank() != 2 || z.rank() != 2 || h_out.rows() != z.rows()) {
    throw ShapeError("skip_combine: h " + to_string(h_out.shape()) + " and z " + to_string(z.shape()) +
                     " must be rank-2 with equal batch");
  }
  Tensor pre = add(add(matmul(h_out, w.w_h), matmul(z, w.w_z)), w.bias);
  return is_last ? pre : activate(pre, act);
}

inline Tensor decode_skip(const Tensor& z, const DecoderParams& dec, Activation act) {
  check_latent(z, dec);
  const std::size_t last = dec.layers.size() - 1;
  if (dec.skips.size() != last) {
    throw std::invalid_argument("decode_skip: expected " + std::to_string(last) + " skip layers, got " +
                                std::to_string(dec.skips.size()));
  }
  Tensor h = activate(apply(dec.layers[0], z), act);
  for (std::size_t l = 1; l <= last; ++l) {
    h = skip_combine(apply(dec.layers[l], h), z, dec.skips[l - 1], l == last, act);
  }
  return h;
}

inline Tensor decode(const Tensor& z, const DecoderParams& dec, Activation act) {
  return dec.has_skips() ? decode_skip(z, dec, act) : decode_plain(z, dec, act);
}

/// Skip weights that make decode_skip reproduce decode_plain exactly.
inline std::vector<SkipWeights> neutral_skips(const DecoderParams& dec) {
  std::vector<SkipWeights> out;
  const std::size_t d = dec.layers.front().weight.rows();
  for (std::size_t l = 1; l < dec.layers.size(); ++l) {
    const std::size_t width = dec.layers[l].weight.cols();
    out.push_back({Tensor::identity(width), Tensor::zeros({d, width}), Tensor::zeros({width})});
  }
  return out;
}

/// Zeroes the mean and log-variance heads so every input maps to the prior.
inline void collapse_to_prior(EncoderParams& enc) {
  for (Affine* head : {&enc.mean, &enc.logvar}) {
    head->weight = Tensor::zeros(head->weight.shape());
    head->bias = Tensor::zeros(head->bias.shape());
  }
}

/// Log-likelihood of an observation batch under the decoder, per example;
/// the hook consumed by the refinement and the importance estimator.
using LogLikelihoodFn = std::function<Tensor(const Tensor& z)>;

inline LogLikelihoodFn bernoulli_decoder_likelihood(const Tensor& x, const DecoderParams& dec, Activation act) {
  return [x, dec, act](const Tensor& z) { return bernoulli_log_prob(decode(z, dec, act), x); };
}

}  // namespace skipvae
