#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "nhmm/alignment.hpp"
#include "nhmm/brute_force.hpp"
#include "nhmm/fullsum_lattice.hpp"
#include "nhmm/trainer.hpp"
#include "nhmm/transition_model.hpp"

namespace nhmm::verify {

// Randomized self-checks shared by the `check` command and the test suites.

struct Instance {
  MatrixD log_phi;
  TransitionField field;
  Scales scales;
};

/// Random feasible lattice: T in [1, max_frames], S in [1, min(T, max_states)],
/// log-softmax-normalized posteriors, sigmoid-normalized transitions.
template <class Rng>
Instance random_instance(Rng& rng, std::size_t max_frames = 8, std::size_t max_states = 5,
                         double max_scale = 1.5) {
  std::uniform_int_distribution<std::size_t> tdist(1, max_frames);
  const std::size_t T = tdist(rng);
  std::uniform_int_distribution<std::size_t> sdist(1, std::min(T, max_states));
  const std::size_t S = sdist(rng);
  std::normal_distribution<double> normal(0.0, 1.5);
  std::uniform_real_distribution<double> scale(0.0, max_scale);

  Instance in;
  in.log_phi = MatrixD(T, S);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> z(S + 2);
    for (double& v : z) v = normal(rng);
    const double lse = log_sum_exp(z);
    for (std::size_t s = 0; s < S; ++s) in.log_phi(t, s) = z[s] - lse;
  }
  in.field = TransitionField{MatrixD(T, S), MatrixD(T, S)};
  for (std::size_t i = 0; i < T * S; ++i) {
    const double x = normal(rng);
    in.field.log_forward.flat()[i] = log_sigmoid(x);
    in.field.log_loop.flat()[i] = log_sigmoid(-x);
  }
  in.scales = {scale(rng), scale(rng)};
  return in;
}

inline double max_abs_diff(const MatrixD& a, const MatrixD& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.flat()[i] - b.flat()[i]));
  return m;
}

/// |a - b| / max(|a|, |b|, 1e-6).
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

/// Fourth-order central difference of f at x along one coordinate.
inline double central_difference(const std::function<double(double)>& f, double x, double h = 1e-3) {
  return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h);
}

struct NormalizationErrors {
  double gamma_rows = 0.0;
  double xi_outgoing = 0.0;
  double xi_incoming = 0.0;
  double boundary = 0.0;

  double max() const { return std::max({gamma_rows, xi_outgoing, xi_incoming, boundary}); }
};

inline NormalizationErrors normalization_errors(const LatticeStats& st) {
  NormalizationErrors e;
  const std::size_t T = st.gamma.rows(), S = st.gamma.cols();
  for (std::size_t t = 0; t < T; ++t) {
    double row = 0.0;
    for (std::size_t s = 0; s < S; ++s) row += st.gamma(t, s);
    e.gamma_rows = std::max(e.gamma_rows, std::abs(row - 1.0));
  }
  for (std::size_t t = 0; t + 1 < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      e.xi_outgoing = std::max(e.xi_outgoing,
                               std::abs(st.xi_loop(t, s) + st.xi_fwd(t, s) - st.gamma(t, s)));
      const double in = st.xi_loop(t, s) + (s > 0 ? st.xi_fwd(t, s - 1) : 0.0);
      e.xi_incoming = std::max(e.xi_incoming, std::abs(in - st.gamma(t + 1, s)));
    }
  for (std::size_t s = 0; s < S; ++s) {
    e.boundary = std::max(e.boundary, std::abs(st.gamma(0, s) - (s == 0 ? 1.0 : 0.0)));
    e.boundary = std::max(e.boundary, std::abs(st.gamma(T - 1, s) - (s == S - 1 ? 1.0 : 0.0)));
  }
  return e;
}

struct OracleReport {
  std::size_t instances = 0;
  double max_log_likelihood_error = 0.0;
  double max_gamma_error = 0.0;
  double max_xi_error = 0.0;
  double max_normalization_error = 0.0;
  double max_viterbi_excess = -INFINITY;  // best-path score minus log-likelihood
  std::size_t viterbi_mismatches = 0;
  double seconds = 0.0;
};

/// Forward-backward and Viterbi against explicit path enumeration.
inline OracleReport run_oracle_suite(std::size_t instances, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(seed);
  OracleReport r;
  r.instances = instances;
  for (std::size_t i = 0; i < instances; ++i) {
    const auto in = random_instance(rng);
    const auto fb = forward_backward(in.log_phi, in.field, in.scales);
    const auto bf = brute_force(in.log_phi, in.field, in.scales);
    r.max_log_likelihood_error =
        std::max(r.max_log_likelihood_error, std::abs(fb.log_likelihood - bf.log_likelihood));
    r.max_gamma_error = std::max(r.max_gamma_error, max_abs_diff(fb.gamma, bf.gamma));
    r.max_xi_error = std::max({r.max_xi_error, max_abs_diff(fb.xi_loop, bf.xi_loop),
                               max_abs_diff(fb.xi_fwd, bf.xi_fwd)});
    r.max_normalization_error = std::max(r.max_normalization_error, normalization_errors(fb).max());

    // Viterbi against an explicit argmax (first maximum in enumeration order).
    StateChain chain;
    for (std::size_t s = 0; s < in.log_phi.cols(); ++s)
      chain.states.push_back({0, static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s), false});
    const auto vit = viterbi_align(in.log_phi, in.field, in.scales, chain);
    double best = -INFINITY;
    std::vector<std::size_t> best_path;
    for_each_monotone_path(in.log_phi.rows(), in.log_phi.cols(), [&](const std::vector<std::size_t>& p) {
      const double w = path_log_weight(p, in.log_phi, in.field, in.scales);
      if (w > best) best = w, best_path = p;
    });
    if (best_path != vit.path) ++r.viterbi_mismatches;
    r.max_viterbi_excess = std::max(r.max_viterbi_excess, vit.log_score - fb.log_likelihood);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

struct GradientReport {
  std::size_t checked = 0;
  double max_relative_error = 0.0;

  void add(double analytic, double numeric) {
    ++checked;
    max_relative_error = std::max(max_relative_error, relative_error(analytic, numeric));
  }
  void merge(const GradientReport& o) {
    checked += o.checked;
    max_relative_error = std::max(max_relative_error, o.max_relative_error);
  }
};

/// d loss / d log_phi against finite differences of the loss.
inline GradientReport check_log_phi_gradient(std::size_t instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GradientReport rep;
  for (std::size_t i = 0; i < instances; ++i) {
    auto in = random_instance(rng);
    const auto lg = loss_and_grads(in.log_phi, in.field, in.scales);
    for (std::size_t k = 0; k < in.log_phi.size(); ++k) {
      const double x0 = in.log_phi.flat()[k];
      const double num = central_difference(
          [&](double x) {
            in.log_phi.flat()[k] = x;
            return -forward_backward(in.log_phi, in.field, in.scales).log_likelihood;
          },
          x0);
      in.log_phi.flat()[k] = x0;
      rep.add(lg.d_log_phi.flat()[k], num);
    }
  }
  return rep;
}

/// A small inventory and random chain used by the transition-gradient check.
struct TransitionCase {
  LabelInventory inventory;
  StateChain chain;
  MatrixD log_phi;
  MatrixD encoder_out;
  Scales scales;
};

template <class Rng>
TransitionCase random_transition_case(Rng& rng, std::size_t head_dim) {
  TransitionCase c;
  c.inventory = LabelInventory::make({"a", "b", "c"}, "sil", 2, 1);
  std::uniform_int_distribution<int> nlab(1, 2), lab(1, 3);
  std::vector<LabelId> labels(static_cast<std::size_t>(nlab(rng)));
  for (auto& l : labels) l = static_cast<LabelId>(lab(rng));
  c.chain = expand_labels(labels, c.inventory, SilenceMode::mandatory_ends);
  const std::size_t S = c.chain.size();
  std::uniform_int_distribution<std::size_t> tdist(S, 8);
  const std::size_t T = tdist(rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.1, 1.5);
  c.log_phi = MatrixD(T, S);
  for (double& v : c.log_phi.flat()) v = -std::abs(normal(rng)) - 0.1;
  c.encoder_out = MatrixD(T, head_dim);
  for (double& v : c.encoder_out.flat()) v = normal(rng);
  c.scales = {scale(rng), scale(rng)};
  return c;
}

/// Transition-parameter gradient of the log-likelihood against finite
/// differences, for one parametrization. full_input also checks the head
/// weights and the encoder-output gradient.
inline GradientReport check_transition_gradient(TransitionKind kind, std::size_t instances,
                                                std::uint64_t seed) {
  constexpr std::size_t kHeadDim = 3;
  std::mt19937_64 rng(seed);
  GradientReport rep;
  for (std::size_t i = 0; i < instances; ++i) {
    auto c = random_transition_case(rng, kHeadDim);
    auto params = init_params(kind, c.inventory, InitStrategy::random, rng(), kHeadDim);
    if (kind == TransitionKind::full_input) {
      std::normal_distribution<double> normal(0.0, 0.5);
      for (double& w : params.weights.flat()) w = normal(rng);
    }
    const bool head = kind == TransitionKind::full_input;
    const std::size_t T = c.log_phi.rows();
    auto ll = [&]() {
      const auto field = evaluate(params, c.chain, T, head ? &c.encoder_out : nullptr);
      return forward_backward(c.log_phi, field, c.scales).log_likelihood;
    };
    const auto st =
        forward_backward(c.log_phi, evaluate(params, c.chain, T, head ? &c.encoder_out : nullptr), c.scales);
    const auto g = accumulate_grad(params, c.chain, st.xi_loop, st.xi_fwd, c.scales.tm,
                                   head ? &c.encoder_out : nullptr);

    auto probe = [&](double& slot, double analytic) {
      const double x0 = slot;
      const double num = central_difference(
          [&](double x) {
            slot = x;
            return ll();
          },
          x0);
      slot = x0;
      rep.add(analytic, num);
    };
    for (std::size_t k = 0; k < params.logits.size(); ++k) probe(params.logits[k], g.logits[k]);
    if (head) {
      for (std::size_t k = 0; k < params.weights.size(); ++k)
        probe(params.weights.flat()[k], g.weights.flat()[k]);
      for (std::size_t k = 0; k < c.encoder_out.size(); ++k)
        probe(c.encoder_out.flat()[k], g.encoder_out.flat()[k]);
    }
  }
  return rep;
}

/// Tiny end-to-end model used by the joint gradient check.
inline std::pair<Model, Corpus> tiny_model(TransitionKind kind, std::uint64_t seed) {
  Corpus corpus;
  corpus.inventory = LabelInventory::make({"a", "b"}, "sil", 1, 1);  // K = 3
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t u = 0; u < 2; ++u) {
    Utterance utt{"tiny" + std::to_string(u), MatrixD(6, 4), {}};
    for (double& v : utt.features.flat()) v = normal(rng);
    utt.labels = u == 0 ? std::vector<LabelId>{1, 2} : std::vector<LabelId>{2};
    corpus.utterances.push_back(std::move(utt));
  }
  TrainConfig cfg;
  cfg.context = 1;
  cfg.hidden = {5};
  cfg.tm_kind = kind;
  cfg.tm_init = InitStrategy::random;
  cfg.scales = {0.7, 0.9};
  cfg.l2 = 1e-2;
  cfg.dropout = 0.0;
  cfg.seed = seed;
  Model m = make_model(cfg, corpus.inventory, 4);
  if (kind == TransitionKind::full_input)
    for (double& w : m.tm.weights.flat()) w = 0.3 * normal(rng);
  return {std::move(m), std::move(corpus)};
}

/// Joint encoder + transition gradient of the total training loss (with L2)
/// against finite differences on a tiny model (D=4, K=3, T=6).
inline GradientReport check_model_gradient(TransitionKind kind, std::uint64_t seed) {
  auto [model, corpus] = tiny_model(kind, seed);
  std::vector<const Utterance*> batch;
  for (const auto& u : corpus.utterances) batch.push_back(&u);
  const auto b = batch_gradient(model, batch, std::vector<std::uint64_t>(batch.size(), 0), false, 1);
  GradientReport rep;
  auto probe = [&](double& slot, double analytic) {
    const double x0 = slot;
    const double num = central_difference(
        [&](double x) {
          slot = x;
          return batch_loss(model, batch);
        },
        x0, 1e-4);
    slot = x0;
    rep.add(analytic, num);
  };
  for (std::size_t l = 0; l < model.encoder.layers.size(); ++l) {
    auto& L = model.encoder.layers[l];
    for (std::size_t k = 0; k < L.weight.size(); ++k)
      probe(L.weight.flat()[k], b.grad.encoder.layers[l].weight.flat()[k]);
    for (std::size_t k = 0; k < L.bias.size(); ++k) probe(L.bias[k], b.grad.encoder.layers[l].bias[k]);
  }
  for (std::size_t k = 0; k < model.tm.logits.size(); ++k) probe(model.tm.logits[k], b.grad.tm.logits[k]);
  for (std::size_t k = 0; k < model.tm.weights.size(); ++k)
    probe(model.tm.weights.flat()[k], b.grad.tm.weights.flat()[k]);
  return rep;
}

}  // namespace nhmm::verify
