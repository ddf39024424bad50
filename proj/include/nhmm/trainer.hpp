#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nhmm/alignment.hpp"
#include "nhmm/config.hpp"
#include "nhmm/datasets.hpp"
#include "nhmm/encoder.hpp"
#include "nhmm/fullsum_lattice.hpp"
#include "nhmm/optimizer.hpp"
#include "nhmm/parallel.hpp"
#include "nhmm/random.hpp"
#include "nhmm/transition_model.hpp"

namespace nhmm {

/// Training hyperparameters. The default learning-rate range is usually
/// raised for small synthetic corpora.
struct TrainConfig {
  std::size_t context = 2;
  std::vector<std::size_t> hidden = {64};
  Activation activation = Activation::tanh;
  TransitionKind tm_kind = TransitionKind::speech_silence;
  InitStrategy tm_init = InitStrategy::flat;
  Scales scales{0.3, 0.3};
  double lr_min = 1.2e-5;
  double lr_max = 3.0e-4;
  double cycle_fraction = 0.8;
  double l2 = 1e-4;
  double dropout = 0.1;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  double prior_scale = 0.3;
  std::size_t pretrain_epochs = 2;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline TrainConfig parse_train_config(KeyValueConfig& kv) {
  TrainConfig c;
  c.context = kv.get_uint("encoder.context", c.context);
  c.hidden = kv.get_uint_list("encoder.hidden", c.hidden);
  c.activation = parse_activation(kv.get_string("encoder.activation", std::string(to_string(c.activation))));
  c.tm_kind = parse_transition_kind(kv.get_string("tm.kind", std::string(to_string(c.tm_kind))));
  c.tm_init = parse_init_strategy(kv.get_string("tm.init", std::string(to_string(c.tm_init))));
  c.scales.lpm = kv.get_double("scales.lpm", c.scales.lpm);
  c.scales.tm = kv.get_double("scales.tm", c.scales.tm);
  c.lr_min = kv.get_double("lr.min", c.lr_min);
  c.lr_max = kv.get_double("lr.max", c.lr_max);
  c.cycle_fraction = kv.get_double("lr.cycle_fraction", c.cycle_fraction);
  c.l2 = kv.get_double("l2", c.l2);
  c.dropout = kv.get_double("dropout", c.dropout);
  c.epochs = kv.get_uint("epochs", c.epochs);
  c.batch_size = kv.get_uint("batch_size", c.batch_size);
  c.seed = kv.get_uint("seed", c.seed);
  c.prior_scale = kv.get_double("prior.scale", c.prior_scale);
  c.pretrain_epochs = kv.get_uint("pretrain.epochs", c.pretrain_epochs);
  if (c.batch_size == 0) throw std::runtime_error("batch_size must be >= 1");
  if (!(c.scales.lpm >= 0.0) || !(c.scales.tm >= 0.0)) throw std::runtime_error("scales must be >= 0");
  if (!(c.l2 >= 0.0)) throw std::runtime_error("l2 must be >= 0");
  if (!(c.prior_scale >= 0.0)) throw std::runtime_error("prior.scale must be >= 0");
  OneCycleSchedule{c.lr_min, c.lr_max, c.cycle_fraction, 1}.validate();
  return c;
}

/// Canonical text form; doubles are written with round-trip precision.
inline std::string format_train_config(const TrainConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "encoder.context = " << c.context << '\n' << "encoder.hidden =";
  for (auto h : c.hidden) os << ' ' << h;
  os << '\n'
     << "encoder.activation = " << to_string(c.activation) << '\n'
     << "tm.kind = " << to_string(c.tm_kind) << '\n'
     << "tm.init = " << to_string(c.tm_init) << '\n'
     << "scales.lpm = " << c.scales.lpm << '\n'
     << "scales.tm = " << c.scales.tm << '\n'
     << "lr.min = " << c.lr_min << '\n'
     << "lr.max = " << c.lr_max << '\n'
     << "lr.cycle_fraction = " << c.cycle_fraction << '\n'
     << "l2 = " << c.l2 << '\n'
     << "dropout = " << c.dropout << '\n'
     << "epochs = " << c.epochs << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "seed = " << c.seed << '\n'
     << "prior.scale = " << c.prior_scale << '\n'
     << "pretrain.epochs = " << c.pretrain_epochs << '\n';
  return os.str();
}

struct Model {
  LabelInventory inventory;
  EncoderConfig encoder_config;
  EncoderWeights encoder;
  TransitionParams tm;
  std::vector<double> log_prior;  // per label; empty when no prior was estimated
  TrainConfig config;
  std::uint64_t step = 0;

  friend bool operator==(const Model&, const Model&) = default;
};

inline Model make_model(const TrainConfig& cfg, const LabelInventory& inventory,
                        std::size_t feature_dim) {
  Model m;
  m.inventory = inventory;
  m.config = cfg;
  m.encoder_config = {feature_dim, cfg.context, cfg.hidden, cfg.activation,
                      inventory.num_labels(), cfg.dropout};
  m.encoder = init_encoder(m.encoder_config, mix_seed(cfg.seed, 0xE7C));
  m.tm = init_params(cfg.tm_kind, inventory, cfg.tm_init, mix_seed(cfg.seed, 0x7A),
                     m.encoder_config.top_dim());
  return m;
}

/// Score fed to the lattice for label l: log p(l | x) - (prior_scale / lpm) * log_prior[l],
/// so that after the lpm exponent the prior enters with exponent prior_scale.
struct PriorCorrection {
  std::span<const double> log_prior;
  double scale = 0.0;

  bool active() const noexcept { return !log_prior.empty() && scale != 0.0; }
};

inline MatrixD chain_scores(const MatrixD& log_probs, const StateChain& chain, const Scales& scales,
                            const PriorCorrection& prior = {}) {
  MatrixD log_phi = gather_log_phi(log_probs, chain);
  if (prior.active() && scales.lpm > 0.0) {
    const double k = prior.scale / scales.lpm;
    for (std::size_t t = 0; t < log_phi.rows(); ++t)
      for (std::size_t s = 0; s < chain.size(); ++s) log_phi(t, s) -= k * prior.log_prior[chain[s].label];
  }
  return log_phi;
}

/// Gradients of the summed loss over one batch, in the model's parameter layout.
struct ModelGrad {
  EncoderWeights encoder;
  TransitionGrad tm;
};

struct UtteranceResult {
  bool skipped = false;
  double loss = 0.0;
  std::size_t frames = 0;
  ModelGrad grad;
};

/// Loss and gradients (minimization convention) of a single utterance,
/// without the L2 term.
inline UtteranceResult utterance_gradient(const Model& model, const Utterance& utt, bool train_mode,
                                          std::uint64_t dropout_seed,
                                          const PriorCorrection& prior = {}) {
  UtteranceResult r;
  const auto chain = expand_labels(utt.labels, model.inventory);
  if (!chain_feasible(chain, utt.features.rows())) {
    r.skipped = true;
    return r;
  }
  const auto& cfg = model.config;
  auto enc = encoder_forward(model.encoder_config, model.encoder, utt.features, train_mode, dropout_seed);
  const bool head = model.tm.kind == TransitionKind::full_input;
  const MatrixD* top = head ? &enc.top() : nullptr;

  const auto log_phi = chain_scores(enc.log_probs, chain, cfg.scales, prior);
  const auto field = evaluate(model.tm, chain, utt.features.rows(), top);
  LossAndGrads lg;
  try {
    lg = loss_and_grads(log_phi, field, cfg.scales);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error("utterance '" + utt.utt_id + "': " + e.what());
  }
  if (!std::isfinite(lg.loss))
    throw std::runtime_error("non-finite loss for utterance '" + utt.utt_id + "'");

  r.loss = lg.loss;
  r.frames = utt.features.rows();
  r.grad.tm = accumulate_grad(model.tm, chain, lg.xi_loop, lg.xi_fwd, cfg.scales.tm, top);
  for (double& v : r.grad.tm.logits) v = -v;
  for (double& v : r.grad.tm.weights.flat()) v = -v;
  for (double& v : r.grad.tm.encoder_out.flat()) v = -v;

  MatrixD d_log_probs(utt.features.rows(), model.inventory.num_labels(), 0.0);
  scatter_add(lg.d_log_phi, chain, d_log_probs);
  r.grad.encoder = encoder_backward(model.encoder_config, model.encoder, enc.cache, d_log_probs,
                                    head ? &r.grad.tm.encoder_out : nullptr, 0.0);
  return r;
}

inline void add_into(ModelGrad& acc, const ModelGrad& g) {
  for (std::size_t l = 0; l < acc.encoder.layers.size(); ++l) {
    auto a = acc.encoder.layers[l].weight.flat();
    auto b = g.encoder.layers[l].weight.flat();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    for (std::size_t i = 0; i < acc.encoder.layers[l].bias.size(); ++i)
      acc.encoder.layers[l].bias[i] += g.encoder.layers[l].bias[i];
  }
  for (std::size_t i = 0; i < acc.tm.logits.size(); ++i) acc.tm.logits[i] += g.tm.logits[i];
  for (std::size_t i = 0; i < acc.tm.weights.size(); ++i)
    acc.tm.weights.flat()[i] += g.tm.weights.flat()[i];
}

inline ModelGrad zero_grad(const Model& m) {
  ModelGrad g;
  g.encoder = zero_like(m.encoder);
  g.tm.logits.assign(m.tm.logits.size(), 0.0);
  g.tm.weights = MatrixD(m.tm.weights.rows(), m.tm.weights.cols(), 0.0);
  return g;
}

struct BatchResult {
  double loss = 0.0;  // summed over utterances
  std::size_t frames = 0;
  std::size_t skipped = 0;
  ModelGrad grad;     // includes the L2 term
};

/// Summed loss and gradient over a batch. Per-utterance work may run in
/// parallel; results are reduced in batch order.
inline BatchResult batch_gradient(const Model& model, const std::vector<const Utterance*>& batch,
                                  const std::vector<std::uint64_t>& dropout_seeds, bool train_mode,
                                  std::size_t threads, const PriorCorrection& prior = {}) {
  std::vector<UtteranceResult> results(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    results[i] = utterance_gradient(model, *batch[i], train_mode, dropout_seeds[i], prior);
  });
  BatchResult b;
  b.grad = zero_grad(model);
  for (const auto& r : results) {
    if (r.skipped) {
      ++b.skipped;
      continue;
    }
    b.loss += r.loss;
    b.frames += r.frames;
    add_into(b.grad, r.grad);
  }
  const double l2 = model.config.l2;
  if (l2 != 0.0)
    for (std::size_t l = 0; l < model.encoder.layers.size(); ++l) {
      const auto w = model.encoder.layers[l].weight.flat();
      auto g = b.grad.encoder.layers[l].weight.flat();
      for (std::size_t i = 0; i < w.size(); ++i) g[i] += l2 * w[i];
    }
  return b;
}

/// Total training loss matching `batch_gradient` (data term plus L2).
inline double batch_loss(const Model& model, const std::vector<const Utterance*>& batch,
                         const PriorCorrection& prior = {}) {
  double loss = 0.0;
  for (const auto* u : batch) {
    const auto chain = expand_labels(u->labels, model.inventory);
    if (!chain_feasible(chain, u->features.rows())) continue;
    auto enc = encoder_forward(model.encoder_config, model.encoder, u->features, false);
    const MatrixD* top = model.tm.kind == TransitionKind::full_input ? &enc.top() : nullptr;
    const auto field = evaluate(model.tm, chain, u->features.rows(), top);
    loss -= forward_backward(chain_scores(enc.log_probs, chain, model.config.scales, prior), field,
                             model.config.scales)
                .log_likelihood;
  }
  for (const auto& l : model.encoder.layers)
    for (double w : l.weight.flat()) loss += 0.5 * model.config.l2 * w * w;
  return loss;
}

/// Drives optimization of one model: schedule, optimizer, freezing.
class Trainer {
 public:
  Trainer(Model& model, std::uint64_t total_steps, std::size_t threads = 1)
      : model_(model),
        schedule_{model.config.lr_min, model.config.lr_max, model.config.cycle_fraction,
                  std::max<std::uint64_t>(1, total_steps)},
        threads_(threads) {
    schedule_.validate();
  }

  /// Freezes the transition parameters regardless of kind.
  void freeze_transitions(bool frozen) { tm_frozen_ = frozen; }
  void set_prior_correction(std::vector<double> log_prior, double scale) {
    prior_log_ = std::move(log_prior);
    prior_scale_ = scale;
  }

  const OneCycleSchedule& schedule() const noexcept { return schedule_; }
  std::uint64_t local_step() const noexcept { return optimizer_.step_count(); }
  std::size_t skipped_total() const noexcept { return skipped_total_; }

  /// One optimizer update on `batch`. `indices` are corpus positions used to
  /// derive per-utterance dropout streams.
  BatchResult train_step(const std::vector<const Utterance*>& batch,
                         const std::vector<std::size_t>& indices) {
    std::vector<std::uint64_t> seeds(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i)
      seeds[i] = mix_seed(model_.config.seed, model_.step, indices[i]);
    BatchResult b = batch_gradient(model_, batch, seeds, true, threads_, prior());
    skipped_total_ += b.skipped;
    if (!std::isfinite(b.loss)) throw std::runtime_error("non-finite batch loss");

    std::vector<std::span<double>> params;
    std::vector<std::span<const double>> grads;
    std::vector<std::uint8_t> frozen;
    for (std::size_t l = 0; l < model_.encoder.layers.size(); ++l) {
      params.push_back(model_.encoder.layers[l].weight.flat());
      grads.push_back(b.grad.encoder.layers[l].weight.flat());
      params.push_back(model_.encoder.layers[l].bias);
      grads.push_back(b.grad.encoder.layers[l].bias);
      frozen.insert(frozen.end(), 2, 0);
    }
    const bool tm_frozen = tm_frozen_ || !is_trainable(model_.tm.kind);
    params.push_back(model_.tm.logits);
    grads.push_back(b.grad.tm.logits);
    params.push_back(model_.tm.weights.flat());
    grads.push_back(b.grad.tm.weights.flat());
    frozen.insert(frozen.end(), 2, tm_frozen ? 1 : 0);

    optimizer_.update(params, grads, schedule_(optimizer_.step_count()), frozen);
    ++model_.encoder.version;
    ++model_.step;
    return b;
  }

  struct EpochStats {
    double loss_per_frame = 0.0;
    std::size_t frames = 0;
    std::size_t skipped = 0;
  };

  /// One pass over the corpus in a seeded random order.
  EpochStats train_epoch(const Corpus& corpus, std::size_t epoch) {
    std::vector<std::size_t> order(corpus.utterances.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(model_.config.seed, 0xE90C, epoch));
    std::shuffle(order.begin(), order.end(), rng);

    EpochStats st;
    double loss = 0.0;
    const std::size_t bs = model_.config.batch_size;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<const Utterance*> batch;
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) {
        batch.push_back(&corpus.utterances[order[i]]);
        idx.push_back(order[i]);
      }
      auto b = train_step(batch, idx);
      loss += b.loss;
      st.frames += b.frames;
      st.skipped += b.skipped;
    }
    st.loss_per_frame = st.frames ? loss / static_cast<double>(st.frames) : 0.0;
    return st;
  }

 private:
  PriorCorrection prior() const { return {prior_log_, prior_scale_}; }

  Model& model_;
  OneCycleSchedule schedule_;
  NAdam optimizer_;
  std::size_t threads_ = 1;
  bool tm_frozen_ = false;
  std::vector<double> prior_log_;
  double prior_scale_ = 0.0;
  std::size_t skipped_total_ = 0;
};

inline std::uint64_t steps_per_epoch(const Corpus& corpus, std::size_t batch_size) {
  return (corpus.utterances.size() + batch_size - 1) / batch_size;
}

enum class PriorSource { occupancy, posterior };

/// Label prior over all training frames, floored at 1e-8 and normalized.
/// `occupancy` weights each frame's chain labels by gamma under the current
/// model; `posterior` averages the encoder's label posteriors.
inline std::vector<double> estimate_prior(const Corpus& corpus, const Model& model,
                                          PriorSource source = PriorSource::occupancy,
                                          std::size_t threads = 1) {
  if (corpus.utterances.empty()) throw std::invalid_argument("empty corpus");
  const std::size_t K = model.inventory.num_labels();
  std::vector<std::vector<double>> partial(corpus.utterances.size(), std::vector<double>(K, 0.0));
  parallel_for(corpus.utterances.size(), threads, [&](std::size_t i) {
    const auto& u = corpus.utterances[i];
    auto enc = encoder_forward(model.encoder_config, model.encoder, u.features, false);
    auto& acc = partial[i];
    if (source == PriorSource::posterior) {
      for (std::size_t t = 0; t < enc.log_probs.rows(); ++t)
        for (std::size_t k = 0; k < K; ++k) acc[k] += std::exp(enc.log_probs(t, k));
      return;
    }
    const auto chain = expand_labels(u.labels, model.inventory);
    if (!chain_feasible(chain, u.features.rows())) return;
    const MatrixD* top = model.tm.kind == TransitionKind::full_input ? &enc.top() : nullptr;
    const auto st = forward_backward(chain_scores(enc.log_probs, chain, model.config.scales),
                                     evaluate(model.tm, chain, u.features.rows(), top),
                                     model.config.scales);
    for (std::size_t t = 0; t < st.gamma.rows(); ++t)
      for (std::size_t s = 0; s < chain.size(); ++s) acc[chain[s].label] += st.gamma(t, s);
  });
  std::vector<double> prior(K, 0.0);
  for (const auto& p : partial)
    for (std::size_t k = 0; k < K; ++k) prior[k] += p[k];
  double total = std::accumulate(prior.begin(), prior.end(), 0.0);
  if (!(total > 0.0)) throw std::runtime_error("no frames to estimate a prior from");
  for (double& p : prior) p = std::max(p / total, 1e-8);
  total = std::accumulate(prior.begin(), prior.end(), 0.0);
  for (double& p : prior) p /= total;
  return prior;
}

inline std::vector<double> log_of(const std::vector<double>& p) {
  std::vector<double> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = std::log(p[i]);
  return out;
}

enum class PretrainMode { none, plain, with_prior };

inline PretrainMode parse_pretrain_mode(std::string_view s) {
  if (s == "none") return PretrainMode::none;
  if (s == "plain") return PretrainMode::plain;
  if (s == "prior") return PretrainMode::with_prior;
  throw std::invalid_argument("unknown pretrain mode '" + std::string(s) + "'");
}

/// Trains the encoder with the transition model frozen at guessed values.
/// With a prior, the prior is re-estimated before every epoch and applied
/// inside the lattice; the final estimate is kept in the model.
inline void pretrain(Model& model, const Corpus& corpus, std::size_t epochs, PretrainMode mode,
                     std::size_t threads = 1) {
  if (mode == PretrainMode::none || epochs == 0) return;
  model.tm = init_params(model.tm.kind, model.inventory, InitStrategy::guessed,
                         mix_seed(model.config.seed, 0x7A), model.encoder_config.top_dim());
  Trainer trainer(model, epochs * steps_per_epoch(corpus, model.config.batch_size), threads);
  trainer.freeze_transitions(true);
  for (std::size_t e = 0; e < epochs; ++e) {
    if (mode == PretrainMode::with_prior) {
      model.log_prior = log_of(estimate_prior(corpus, model, PriorSource::occupancy, threads));
      trainer.set_prior_correction(model.log_prior, model.config.prior_scale);
    }
    trainer.train_epoch(corpus, 0x9000 + e);
  }
}

struct EpochReport {
  std::size_t epoch = 0;
  double loss_per_frame = 0.0;
  std::size_t skipped = 0;
};

/// Main joint training for `config.epochs` epochs; `on_epoch` runs after each.
inline std::vector<EpochReport> train(Model& model, const Corpus& corpus, std::size_t threads = 1,
                                      const std::function<void(const EpochReport&)>& on_epoch = {}) {
  Trainer trainer(model, model.config.epochs * steps_per_epoch(corpus, model.config.batch_size),
                  threads);
  std::vector<EpochReport> reports;
  for (std::size_t e = 0; e < model.config.epochs; ++e) {
    const auto st = trainer.train_epoch(corpus, e);
    reports.push_back({e + 1, st.loss_per_frame, st.skipped});
    if (on_epoch) on_epoch(reports.back());
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Inference helpers.

struct UtteranceLattice {
  StateChain chain;
  MatrixD log_phi;
  TransitionField field;
};

inline UtteranceLattice build_lattice(const Model& model, const Utterance& u,
                                      const PriorCorrection& prior = {}) {
  UtteranceLattice L;
  L.chain = expand_labels(u.labels, model.inventory);
  if (!chain_feasible(L.chain, u.features.rows()))
    throw InfeasibleChain(u.features.rows(), L.chain.size());
  auto enc = encoder_forward(model.encoder_config, model.encoder, u.features, false);
  const MatrixD* top = model.tm.kind == TransitionKind::full_input ? &enc.top() : nullptr;
  L.log_phi = chain_scores(enc.log_probs, L.chain, model.config.scales, prior);
  L.field = evaluate(model.tm, L.chain, u.features.rows(), top);
  return L;
}

struct CorpusAlignment {
  std::vector<Alignment> alignments;
  std::vector<std::string> skipped;  // infeasible utterance ids
};

/// Viterbi forced alignment of every utterance. With a positive prior scale
/// and a stored prior, the prior is divided out before the maximization.
inline CorpusAlignment align_corpus(const Model& model, const Corpus& corpus, double prior_scale,
                                    std::size_t threads = 1) {
  std::vector<std::optional<Alignment>> out(corpus.utterances.size());
  parallel_for(corpus.utterances.size(), threads, [&](std::size_t i) {
    const auto& u = corpus.utterances[i];
    const auto chain = expand_labels(u.labels, model.inventory);
    if (!chain_feasible(chain, u.features.rows())) return;
    const auto L = build_lattice(model, u);
    out[i] = viterbi_align(L.log_phi, L.field, model.config.scales, L.chain, u.utt_id,
                           model.log_prior, model.log_prior.empty() ? 0.0 : prior_scale)
                 .alignment;
  });
  CorpusAlignment r;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i])
      r.alignments.push_back(std::move(*out[i]));
    else
      r.skipped.push_back(corpus.utterances[i].utt_id);
  }
  return r;
}

}  // namespace nhmm
