#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "nhmm/log_math.hpp"
#include "nhmm/matrix.hpp"

namespace nhmm {

// Feedforward label posterior model: features stacked over a symmetric
// context window, dense hidden layers, and a K-way log-softmax output.

enum class Activation { tanh, relu };

inline std::string_view to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

inline Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

struct EncoderConfig {
  std::size_t input_dim = 1;
  std::size_t context = 0;  // frames on each side
  std::vector<std::size_t> hidden;
  Activation activation = Activation::tanh;
  std::size_t output_dim = 2;
  double dropout = 0.0;

  std::size_t stacked_dim() const noexcept { return input_dim * (2 * context + 1); }
  /// Width of the representation that feeds the output layer.
  std::size_t top_dim() const noexcept { return hidden.empty() ? stacked_dim() : hidden.back(); }

  void validate() const {
    if (input_dim == 0) throw std::invalid_argument("encoder input_dim must be >= 1");
    if (output_dim < 1) throw std::invalid_argument("encoder output_dim must be >= 1");
    for (auto w : hidden)
      if (w == 0) throw std::invalid_argument("hidden layer widths must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct DenseLayer {
  MatrixD weight;  // in x out
  std::vector<double> bias;

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct EncoderWeights {
  std::vector<DenseLayer> layers;
  std::uint64_t version = 0;  // bumped on every in-place update

  std::size_t num_parameters() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  friend bool operator==(const EncoderWeights& a, const EncoderWeights& b) {
    return a.layers == b.layers;
  }
};

/// Zero biases, Glorot-uniform weight matrices.
inline EncoderWeights init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  EncoderWeights w;
  std::size_t in = cfg.stacked_dim();
  auto add = [&](std::size_t out) {
    DenseLayer l{MatrixD(in, out), std::vector<double>(out, 0.0)};
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (double& v : l.weight.flat()) v = u(rng);
    w.layers.push_back(std::move(l));
    in = out;
  };
  for (auto h : cfg.hidden) add(h);
  add(cfg.output_dim);
  return w;
}

inline EncoderWeights zero_like(const EncoderWeights& w) {
  EncoderWeights z;
  for (const auto& l : w.layers)
    z.layers.push_back({MatrixD(l.weight.rows(), l.weight.cols(), 0.0),
                        std::vector<double>(l.bias.size(), 0.0)});
  return z;
}

/// Features of frames t-context..t+context concatenated, edges replicated.
inline MatrixD stack_context(const MatrixD& features, std::size_t context) {
  const std::size_t T = features.rows(), D = features.cols();
  MatrixD out(T, D * (2 * context + 1));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k <= 2 * context; ++k) {
      const long long src_signed = static_cast<long long>(t) + static_cast<long long>(k) -
                                   static_cast<long long>(context);
      const std::size_t src = static_cast<std::size_t>(
          std::clamp<long long>(src_signed, 0, static_cast<long long>(T) - 1));
      for (std::size_t d = 0; d < D; ++d) out(t, k * D + d) = features(src, d);
    }
  return out;
}

struct EncoderCache {
  std::uint64_t weights_version = 0;
  std::vector<MatrixD> layer_inputs;  // input of each layer (post-dropout)
  std::vector<MatrixD> activations;   // hidden outputs before dropout
  std::vector<MatrixD> dropout_scale; // per hidden layer; empty when inactive
  MatrixD log_probs;
};

struct EncoderOutput {
  MatrixD log_probs;  // T x K
  EncoderCache cache;

  /// Representation feeding the output layer (input of a transition head).
  const MatrixD& top() const noexcept { return cache.layer_inputs.back(); }
};

namespace detail {

inline void affine(const MatrixD& x, const DenseLayer& l, MatrixD& y) {
  const std::size_t T = x.rows(), in = x.cols(), out = l.weight.cols();
  y = MatrixD(T, out);
  for (std::size_t t = 0; t < T; ++t) {
    auto yr = y.row(t);
    std::copy(l.bias.begin(), l.bias.end(), yr.begin());
    const auto xr = x.row(t);
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      if (xi == 0.0) continue;
      const auto wr = l.weight.row(i);
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
    }
  }
}

}  // namespace detail

inline EncoderOutput encoder_forward(const EncoderConfig& cfg, const EncoderWeights& weights,
                                     const MatrixD& features, bool train_mode,
                                     std::uint64_t seed = 0) {
  if (features.cols() != cfg.input_dim)
    throw std::invalid_argument("feature dimension " + std::to_string(features.cols()) +
                                " does not match encoder input_dim " +
                                std::to_string(cfg.input_dim));
  if (weights.layers.size() != cfg.hidden.size() + 1)
    throw std::invalid_argument("encoder weights do not match configuration");
  if (features.rows() == 0) throw std::invalid_argument("no frames");
  for (double v : features.flat())
    if (!std::isfinite(v)) throw std::invalid_argument("features contain non-finite values");

  EncoderOutput out;
  auto& c = out.cache;
  c.weights_version = weights.version;
  c.layer_inputs.push_back(stack_context(features, cfg.context));

  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - cfg.dropout);
  const bool drop = train_mode && cfg.dropout > 0.0;
  const double inv_keep = 1.0 / (1.0 - cfg.dropout);

  for (std::size_t l = 0; l < cfg.hidden.size(); ++l) {
    MatrixD h;
    detail::affine(c.layer_inputs.back(), weights.layers[l], h);
    for (double& v : h.flat())
      v = cfg.activation == Activation::tanh ? std::tanh(v) : std::max(0.0, v);
    MatrixD next = h;
    MatrixD scale;
    if (drop) {
      scale = MatrixD(h.rows(), h.cols());
      for (std::size_t i = 0; i < h.size(); ++i) {
        scale.flat()[i] = keep(rng) ? inv_keep : 0.0;
        next.flat()[i] *= scale.flat()[i];
      }
    }
    c.activations.push_back(std::move(h));
    c.dropout_scale.push_back(std::move(scale));
    c.layer_inputs.push_back(std::move(next));
  }

  MatrixD z;
  detail::affine(c.layer_inputs.back(), weights.layers.back(), z);
  for (std::size_t t = 0; t < z.rows(); ++t) {
    auto r = z.row(t);
    const double lse = log_sum_exp(r);
    for (double& v : r) v -= lse;
  }
  c.log_probs = z;
  out.log_probs = std::move(z);
  return out;
}

/// Gradients of a loss w.r.t. all weights given d loss / d log_probs and,
/// optionally, d loss / d top representation. The L2 term contributes
/// l2 * W for every weight matrix (loss term l2/2 * ||W||^2, biases exempt).
inline EncoderWeights encoder_backward(const EncoderConfig& cfg, const EncoderWeights& weights,
                                       const EncoderCache& cache, const MatrixD& d_log_probs,
                                       const MatrixD* d_top = nullptr, double l2 = 0.0) {
  if (cache.weights_version != weights.version || cache.layer_inputs.size() != weights.layers.size())
    throw std::logic_error("stale encoder cache");
  const std::size_t T = cache.log_probs.rows();
  require_shape(d_log_probs, T, cfg.output_dim, "d_log_probs");
  if (d_top) require_shape(*d_top, T, cfg.top_dim(), "d_top");

  EncoderWeights g = zero_like(weights);

  // log-softmax: dz = dy - softmax * sum(dy)
  MatrixD delta(T, cfg.output_dim);
  for (std::size_t t = 0; t < T; ++t) {
    const auto dy = d_log_probs.row(t);
    const auto y = cache.log_probs.row(t);
    double sum = 0.0;
    for (double v : dy) sum += v;
    for (std::size_t k = 0; k < dy.size(); ++k) delta(t, k) = dy[k] - std::exp(y[k]) * sum;
  }

  for (std::size_t l = weights.layers.size(); l-- > 0;) {
    const auto& x = cache.layer_inputs[l];
    const auto& W = weights.layers[l].weight;
    auto& gW = g.layers[l].weight;
    auto& gb = g.layers[l].bias;
    const std::size_t in = W.rows(), out = W.cols();
    for (std::size_t t = 0; t < T; ++t) {
      const auto xr = x.row(t);
      const auto dr = delta.row(t);
      for (std::size_t o = 0; o < out; ++o) gb[o] += dr[o];
      for (std::size_t i = 0; i < in; ++i) {
        const double xi = xr[i];
        if (xi == 0.0) continue;
        auto gr = gW.row(i);
        for (std::size_t o = 0; o < out; ++o) gr[o] += xi * dr[o];
      }
    }
    if (l2 != 0.0)
      for (std::size_t i = 0; i < W.size(); ++i) gW.flat()[i] += l2 * W.flat()[i];
    if (l == 0) break;

    MatrixD d_in(T, in, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const auto dr = delta.row(t);
      auto di = d_in.row(t);
      for (std::size_t i = 0; i < in; ++i) {
        const auto wr = W.row(i);
        double acc = 0.0;
        for (std::size_t o = 0; o < out; ++o) acc += wr[o] * dr[o];
        di[i] = acc;
      }
    }
    if (l == weights.layers.size() - 1 && d_top)
      for (std::size_t i = 0; i < d_in.size(); ++i) d_in.flat()[i] += d_top->flat()[i];

    const auto& h = cache.activations[l - 1];
    const auto& scale = cache.dropout_scale[l - 1];
    for (std::size_t i = 0; i < d_in.size(); ++i) {
      double d = d_in.flat()[i];
      if (!scale.empty()) d *= scale.flat()[i];
      const double hv = h.flat()[i];
      d *= cfg.activation == Activation::tanh ? (1.0 - hv * hv) : (hv > 0.0 ? 1.0 : 0.0);
      d_in.flat()[i] = d;
    }
    delta = std::move(d_in);
  }
  return g;
}

}  // namespace nhmm
