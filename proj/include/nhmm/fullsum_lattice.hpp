#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "nhmm/log_math.hpp"
#include "nhmm/matrix.hpp"
#include "nhmm/transition_model.hpp"

namespace nhmm {

/// Log-linear exponents on the label posteriors and the transition model.
struct Scales {
  double lpm = 0.3;
  double tm = 0.3;

  friend bool operator==(const Scales&, const Scales&) = default;
};

/// Full forward-backward output for one utterance.
///
/// `log_likelihood` is the scaled sequence criterion (to be maximized).
/// gamma(t, s) = p(s_t = s | labels, x); xi_loop(t, s) and xi_fwd(t, s) are
/// the posteriors of the arcs s->s and s->s+1 between frames t and t+1.
struct LatticeStats {
  double log_likelihood = 0.0;
  MatrixD gamma;    // T x S
  MatrixD xi_loop;  // (T-1) x S
  MatrixD xi_fwd;   // (T-1) x S, last column is zero
};

class InfeasibleChain : public std::invalid_argument {
 public:
  InfeasibleChain(std::size_t frames, std::size_t states)
      : std::invalid_argument("infeasible chain: " + std::to_string(frames) + " frames < " +
                              std::to_string(states) + " states") {}
};

namespace detail {

inline void check_all_finite(const MatrixD& m, const char* what) {
  for (double v : m.flat())
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + " has non-finite entries");
}

inline void validate_lattice_inputs(const MatrixD& log_phi, const TransitionField& field,
                                    const Scales& scales) {
  const std::size_t T = log_phi.rows(), S = log_phi.cols();
  if (S == 0) throw std::invalid_argument("empty state chain");
  if (T < S) throw InfeasibleChain(T, S);
  require_shape(field.log_forward, T, S, "transition field (forward)");
  require_shape(field.log_loop, T, S, "transition field (loop)");
  if (!(scales.lpm >= 0.0) || !(scales.tm >= 0.0) || !std::isfinite(scales.lpm) ||
      !std::isfinite(scales.tm))
    throw std::invalid_argument("scales must be finite and non-negative");
  check_all_finite(log_phi, "label posteriors");
  check_all_finite(field.log_forward, "transition field");
  check_all_finite(field.log_loop, "transition field");
}

}  // namespace detail

/// Log-space forward-backward over the linear chain. Frame 0 must be spent
/// in state 0 and frame T-1 in state S-1; frame 0 consumes only its emission.
inline LatticeStats forward_backward(const MatrixD& log_phi, const TransitionField& field,
                                     const Scales& scales) {
  detail::validate_lattice_inputs(log_phi, field, scales);
  const std::size_t T = log_phi.rows(), S = log_phi.cols();
  const double lam = scales.lpm, tau = scales.tm;

  MatrixD alpha(T, S, kLogZero), beta(T, S, kLogZero);
  alpha(0, 0) = lam * log_phi(0, 0);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    // States beyond t+1 are unreachable at frame t+1.
    const std::size_t hi = std::min(S, t + 2);
    for (std::size_t s = 0; s < hi; ++s) {
      double acc = alpha(t, s) + tau * field.log_loop(t + 1, s);
      if (s > 0) acc = log_add(acc, alpha(t, s - 1) + tau * field.log_forward(t + 1, s - 1));
      alpha(t + 1, s) = acc + lam * log_phi(t + 1, s);
    }
  }

  beta(T - 1, S - 1) = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = beta(t + 1, s) + tau * field.log_loop(t + 1, s) + lam * log_phi(t + 1, s);
      if (s + 1 < S)
        acc = log_add(acc, beta(t + 1, s + 1) + tau * field.log_forward(t + 1, s) +
                               lam * log_phi(t + 1, s + 1));
      beta(t, s) = acc;
    }
  }

  LatticeStats out;
  out.log_likelihood = alpha(T - 1, S - 1);
  const double ll = out.log_likelihood;
  if (!std::isfinite(ll)) throw std::runtime_error("forward-backward produced non-finite likelihood");

  out.gamma = MatrixD(T, S, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      const double v = alpha(t, s) + beta(t, s);
      if (v != kLogZero) out.gamma(t, s) = std::exp(v - ll);
    }

  out.xi_loop = MatrixD(T - 1, S, 0.0);
  out.xi_fwd = MatrixD(T - 1, S, 0.0);
  for (std::size_t t = 0; t + 1 < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      if (alpha(t, s) == kLogZero) continue;
      const double loop = alpha(t, s) + tau * field.log_loop(t + 1, s) +
                          lam * log_phi(t + 1, s) + beta(t + 1, s);
      if (loop != kLogZero) out.xi_loop(t, s) = std::exp(loop - ll);
      if (s + 1 < S) {
        const double fwd = alpha(t, s) + tau * field.log_forward(t + 1, s) +
                           lam * log_phi(t + 1, s + 1) + beta(t + 1, s + 1);
        if (fwd != kLogZero) out.xi_fwd(t, s) = std::exp(fwd - ll);
      }
    }
  return out;
}

/// Minimization-side view of the lattice: loss = -log_likelihood and
/// d_log_phi = d loss / d log_phi = -lpm_scale * gamma. The pairwise
/// occupancies are handed on to the transition model gradient.
struct LossAndGrads {
  double loss = 0.0;
  MatrixD d_log_phi;
  MatrixD xi_loop;
  MatrixD xi_fwd;
  MatrixD gamma;
};

inline LossAndGrads loss_and_grads(const MatrixD& log_phi, const TransitionField& field,
                                   const Scales& scales) {
  LatticeStats st = forward_backward(log_phi, field, scales);
  LossAndGrads out;
  out.loss = -st.log_likelihood;
  out.d_log_phi = st.gamma;
  for (double& v : out.d_log_phi.flat()) v *= -scales.lpm;
  out.xi_loop = std::move(st.xi_loop);
  out.xi_fwd = std::move(st.xi_fwd);
  out.gamma = std::move(st.gamma);
  return out;
}

/// Gathers T x S chain scores from T x K per-frame label log-probabilities.
inline MatrixD gather_log_phi(const MatrixD& log_probs, const StateChain& chain) {
  MatrixD out(log_probs.rows(), chain.size());
  for (std::size_t t = 0; t < log_probs.rows(); ++t)
    for (std::size_t s = 0; s < chain.size(); ++s) out(t, s) = log_probs(t, chain[s].label);
  return out;
}

/// Adds a T x S chain gradient into a T x K label gradient (labels repeat).
inline void scatter_add(const MatrixD& d_chain, const StateChain& chain, MatrixD& d_labels) {
  for (std::size_t t = 0; t < d_chain.rows(); ++t)
    for (std::size_t s = 0; s < chain.size(); ++s) d_labels(t, chain[s].label) += d_chain(t, s);
}

}  // namespace nhmm
