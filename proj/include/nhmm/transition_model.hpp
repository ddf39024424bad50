#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "nhmm/label_topology.hpp"
#include "nhmm/log_math.hpp"
#include "nhmm/matrix.hpp"

namespace nhmm {

// Transition probabilities p_F = sigmoid(logit), p_L = 1 - p_F, one logit per
// slot. Chain positions are mapped onto slots according to the kind.

enum class TransitionKind { fixed, speech_silence, substate_silence, full, full_input };
enum class InitStrategy { guessed, flat, random };

inline constexpr double kGuessedSpeechForward = 1.0 / 3.0;
inline constexpr double kGuessedSilenceForward = 1.0 / 40.0;

inline std::string_view to_string(TransitionKind k) {
  switch (k) {
    case TransitionKind::fixed: return "fixed";
    case TransitionKind::speech_silence: return "speech_silence";
    case TransitionKind::substate_silence: return "substate_silence";
    case TransitionKind::full: return "full";
    case TransitionKind::full_input: return "full_input";
  }
  return "?";
}

inline TransitionKind parse_transition_kind(std::string_view s) {
  for (auto k : {TransitionKind::fixed, TransitionKind::speech_silence,
                 TransitionKind::substate_silence, TransitionKind::full,
                 TransitionKind::full_input})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown transition model kind '" + std::string(s) + "'");
}

inline std::string_view to_string(InitStrategy s) {
  switch (s) {
    case InitStrategy::guessed: return "guessed";
    case InitStrategy::flat: return "flat";
    case InitStrategy::random: return "random";
  }
  return "?";
}

inline InitStrategy parse_init_strategy(std::string_view s) {
  for (auto k : {InitStrategy::guessed, InitStrategy::flat, InitStrategy::random})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown init strategy '" + std::string(s) + "'");
}

/// Whether the kind receives gradient updates in training.
inline bool is_trainable(TransitionKind k) noexcept { return k != TransitionKind::fixed; }
inline bool is_time_invariant(TransitionKind k) noexcept { return k != TransitionKind::full_input; }

struct TransitionParams {
  TransitionKind kind = TransitionKind::speech_silence;
  LabelInventory inventory;
  std::vector<double> logits;  // per slot; the bias vector for full_input
  MatrixD weights;             // head_input_dim x slots, full_input only

  std::size_t num_slots() const noexcept { return logits.size(); }
  std::size_t head_input_dim() const noexcept { return weights.rows(); }
  std::size_t num_parameters() const noexcept { return logits.size() + weights.size(); }

  friend bool operator==(const TransitionParams&, const TransitionParams&) = default;
};

inline std::size_t slot_count(TransitionKind kind, const LabelInventory& inv) {
  switch (kind) {
    case TransitionKind::fixed:
    case TransitionKind::speech_silence: return 2;
    case TransitionKind::substate_silence: return inv.substates_per_speech_label + 1;
    case TransitionKind::full:
    case TransitionKind::full_input: {
      std::size_t n = 0;
      for (LabelId l = 0; l < inv.num_labels(); ++l) n += inv.substates_of(l);
      return n;
    }
  }
  return 0;
}

inline bool slot_is_silence(const TransitionParams& p, std::size_t slot) {
  const auto& inv = p.inventory;
  switch (p.kind) {
    case TransitionKind::fixed:
    case TransitionKind::speech_silence: return slot == 1;
    case TransitionKind::substate_silence: return slot == inv.substates_per_speech_label;
    case TransitionKind::full:
    case TransitionKind::full_input: {
      std::size_t offset = 0;
      for (LabelId l = 0; l < inv.num_labels(); ++l) {
        const std::size_t n = inv.substates_of(l);
        if (slot < offset + n) return inv.is_silence(l);
        offset += n;
      }
      break;
    }
  }
  throw std::out_of_range("transition slot out of range");
}

inline std::size_t slot_of(const TransitionParams& p, const ChainState& st) {
  const auto& inv = p.inventory;
  switch (p.kind) {
    case TransitionKind::fixed:
    case TransitionKind::speech_silence: return st.is_silence ? 1 : 0;
    case TransitionKind::substate_silence:
      return st.is_silence ? inv.substates_per_speech_label : st.substate;
    case TransitionKind::full:
    case TransitionKind::full_input: {
      std::size_t offset = 0;
      for (LabelId l = 0; l < st.label; ++l) offset += inv.substates_of(l);
      return offset + st.substate;
    }
  }
  return 0;
}

inline std::string slot_name(const TransitionParams& p, std::size_t slot) {
  const auto& inv = p.inventory;
  switch (p.kind) {
    case TransitionKind::fixed:
    case TransitionKind::speech_silence: return slot == 0 ? "speech" : "silence";
    case TransitionKind::substate_silence:
      return slot == inv.substates_per_speech_label ? "silence"
                                                    : "speech." + std::to_string(slot);
    case TransitionKind::full:
    case TransitionKind::full_input: {
      std::size_t offset = 0;
      for (LabelId l = 0; l < inv.num_labels(); ++l) {
        const std::size_t n = inv.substates_of(l);
        if (slot < offset + n) return inv.table.name(l) + "." + std::to_string(slot - offset);
        offset += n;
      }
      break;
    }
  }
  throw std::out_of_range("transition slot out of range");
}

/// `head_input_dim` is only used by full_input.
inline TransitionParams init_params(TransitionKind kind, const LabelInventory& inventory,
                                    InitStrategy strategy, std::uint64_t seed,
                                    std::size_t head_input_dim = 0) {
  inventory.validate();
  TransitionParams p;
  p.kind = kind;
  p.inventory = inventory;
  p.logits.assign(slot_count(kind, inventory), 0.0);
  if (kind == TransitionKind::full_input) {
    if (head_input_dim == 0) throw std::invalid_argument("full_input needs head_input_dim > 0");
    p.weights = MatrixD(head_input_dim, p.logits.size(), 0.0);
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t k = 0; k < p.logits.size(); ++k) {
    switch (strategy) {
      case InitStrategy::guessed:
        p.logits[k] = logit(slot_is_silence(p, k) ? kGuessedSilenceForward : kGuessedSpeechForward);
        break;
      case InitStrategy::flat: p.logits[k] = 0.0; break;
      case InitStrategy::random: p.logits[k] = normal(rng); break;
    }
  }
  return p;
}

/// Per-frame log transition probabilities over a chain. Row t holds the
/// probabilities used when arriving at frame t; row 0 is never consumed.
struct TransitionField {
  MatrixD log_forward;
  MatrixD log_loop;

  std::size_t frames() const noexcept { return log_forward.rows(); }
  std::size_t states() const noexcept { return log_forward.cols(); }

  /// Same log weight for every loop and forward arc. Not normalized unless
  /// log_value == log(1/2).
  static TransitionField constant(std::size_t frames, std::size_t states, double log_value) {
    return {MatrixD(frames, states, log_value), MatrixD(frames, states, log_value)};
  }
};

namespace detail {

inline void check_encoder_out(const TransitionParams& p, std::size_t frames,
                              const MatrixD* encoder_out) {
  if (p.kind == TransitionKind::full_input) {
    if (encoder_out == nullptr) throw std::invalid_argument("full_input requires encoder output");
    require_shape(*encoder_out, frames, p.head_input_dim(), "encoder output");
  } else if (encoder_out != nullptr && encoder_out->rows() != frames) {
    throw std::invalid_argument("encoder output frame count mismatch");
  }
}

// Head logits for frame t, one per slot.
inline void head_logits(const TransitionParams& p, const MatrixD& enc, std::size_t t,
                        std::vector<double>& out) {
  out = p.logits;
  const auto x = enc.row(t);
  for (std::size_t d = 0; d < x.size(); ++d) {
    const double xd = x[d];
    if (xd == 0.0) continue;
    const auto w = p.weights.row(d);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += xd * w[k];
  }
}

}  // namespace detail

inline TransitionField evaluate(const TransitionParams& params, const StateChain& chain,
                                std::size_t frames, const MatrixD* encoder_out = nullptr) {
  detail::check_encoder_out(params, frames, encoder_out);
  const std::size_t S = chain.size();
  TransitionField field{MatrixD(frames, S), MatrixD(frames, S)};
  std::vector<std::size_t> slots(S);
  for (std::size_t s = 0; s < S; ++s) slots[s] = slot_of(params, chain[s]);

  std::vector<double> logits = params.logits;
  for (std::size_t t = 0; t < frames; ++t) {
    if (params.kind == TransitionKind::full_input) detail::head_logits(params, *encoder_out, t, logits);
    for (std::size_t s = 0; s < S; ++s) {
      const double x = logits[slots[s]];
      field.log_forward(t, s) = log_sigmoid(x);
      field.log_loop(t, s) = log_sigmoid(-x);
    }
  }
  return field;
}

struct TransitionGrad {
  std::vector<double> logits;  // d/d logit (bias for full_input)
  MatrixD weights;             // full_input only
  MatrixD encoder_out;         // full_input only: d/d encoder output

  std::size_t num_parameters() const noexcept { return logits.size() + weights.size(); }
};

/// Gradient of the scaled log-likelihood (ascent direction) w.r.t. the
/// transition parameters, from the pairwise occupancies of the same chain.
/// Per cell: tm_scale * (xi_fwd * (1 - p_F) - xi_loop * p_F).
inline TransitionGrad accumulate_grad(const TransitionParams& params, const StateChain& chain,
                                      const MatrixD& xi_loop, const MatrixD& xi_fwd,
                                      double tm_scale, const MatrixD* encoder_out = nullptr) {
  const std::size_t S = chain.size();
  if (xi_loop.cols() != S || xi_fwd.cols() != S || xi_loop.rows() != xi_fwd.rows())
    throw std::invalid_argument("pairwise occupancy shape mismatch");
  const std::size_t frames = xi_loop.rows() + 1;
  detail::check_encoder_out(params, frames, encoder_out);

  TransitionGrad g;
  g.logits.assign(params.num_slots(), 0.0);
  if (params.kind == TransitionKind::full_input) {
    g.weights = MatrixD(params.head_input_dim(), params.num_slots(), 0.0);
    g.encoder_out = MatrixD(frames, params.head_input_dim(), 0.0);
  }
  if (tm_scale == 0.0) return g;

  std::vector<std::size_t> slots(S);
  for (std::size_t s = 0; s < S; ++s) slots[s] = slot_of(params, chain[s]);

  if (is_time_invariant(params.kind)) {
    std::vector<double> fwd(params.num_slots(), 0.0), loop(params.num_slots(), 0.0);
    for (std::size_t t = 0; t + 1 < frames; ++t)
      for (std::size_t s = 0; s < S; ++s) {
        fwd[slots[s]] += xi_fwd(t, s);
        loop[slots[s]] += xi_loop(t, s);
      }
    for (std::size_t k = 0; k < g.logits.size(); ++k) {
      const double p = sigmoid(params.logits[k]);
      g.logits[k] = tm_scale * (fwd[k] * (1.0 - p) - loop[k] * p);
    }
    return g;
  }

  // Arcs leaving frame t arrive at frame t + 1 and use head row t + 1.
  std::vector<double> logits, d_logits(params.num_slots());
  const std::size_t D = params.head_input_dim();
  for (std::size_t t = 0; t + 1 < frames; ++t) {
    detail::head_logits(params, *encoder_out, t + 1, logits);
    std::fill(d_logits.begin(), d_logits.end(), 0.0);
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t k = slots[s];
      const double p = sigmoid(logits[k]);
      d_logits[k] += tm_scale * (xi_fwd(t, s) * (1.0 - p) - xi_loop(t, s) * p);
    }
    const auto x = encoder_out->row(t + 1);
    auto dx = g.encoder_out.row(t + 1);
    for (std::size_t k = 0; k < d_logits.size(); ++k) g.logits[k] += d_logits[k];
    for (std::size_t d = 0; d < D; ++d) {
      const auto w = params.weights.row(d);
      auto dw = g.weights.row(d);
      double acc = 0.0;
      for (std::size_t k = 0; k < d_logits.size(); ++k) {
        dw[k] += d_logits[k] * x[d];
        acc += d_logits[k] * w[k];
      }
      dx[d] += acc;
    }
  }
  return g;
}

}  // namespace nhmm
