#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "nhmm/checkpoint.hpp"
#include "nhmm/trainer.hpp"
#include "nhmm/verification.hpp"
#include "test_support.hpp"

using namespace nhmm;

namespace {

GenerativeSpec small_spec(const std::string& extra = "", double separation = 2.0) {
  std::istringstream in("labels = a b c\nsubstates = 3\nfeature_dim = 4\nemission.separation = " +
                        std::to_string(separation) +
                        "\nmin_labels = 1\nmax_labels = 3\nmax_frames = 200\nseed = 5\n" + extra);
  auto kv = KeyValueConfig::parse(in);
  auto g = parse_generative_spec(kv);
  kv.finish();
  return g;
}

TrainConfig small_config() {
  TrainConfig c;
  c.hidden = {8};
  c.context = 1;
  c.lr_min = 1e-4;
  c.lr_max = 0.02;
  c.epochs = 3;
  c.batch_size = 4;
  c.dropout = 0.1;
  c.seed = 9;
  return c;
}

}  // namespace

TEST(TrainConfig, ParseFormatRoundTrip) {
  auto c = small_config();
  c.tm_kind = TransitionKind::full_input;
  c.hidden = {7, 3};
  c.lr_max = 0.1 / 3.0;
  std::istringstream in(format_train_config(c));
  auto kv = KeyValueConfig::parse(in);
  EXPECT_EQ(parse_train_config(kv), c);
  kv.finish();
}

TEST(TrainConfig, RejectsUnknownKeysAndBadValues) {
  std::istringstream unknown("epochs = 3\nbogus = 1\n");
  auto kv = KeyValueConfig::parse(unknown);
  parse_train_config(kv);
  EXPECT_THROW(kv.finish(), std::runtime_error);
  std::istringstream bad("batch_size = 0\n");
  auto kv2 = KeyValueConfig::parse(bad);
  EXPECT_THROW(parse_train_config(kv2), std::runtime_error);
  std::istringstream bad_lr("lr.min = 0.1\nlr.max = 0.01\n");
  auto kv3 = KeyValueConfig::parse(bad_lr);
  EXPECT_THROW(parse_train_config(kv3), std::invalid_argument);
}

TEST(UtteranceGradient, JointFiniteDifferences) {
  for (auto kind : {TransitionKind::speech_silence, TransitionKind::substate_silence, TransitionKind::full,
                    TransitionKind::full_input}) {
    const auto r = verify::check_model_gradient(kind, 4);
    EXPECT_GT(r.checked, 50u);
    EXPECT_LE(r.max_relative_error, 1e-4) << to_string(kind);
  }
}

TEST(UtteranceGradient, ZeroLabelScaleLeavesOnlyL2) {
  auto [model, corpus] = verify::tiny_model(TransitionKind::speech_silence, 2);
  model.config.scales = {0.0, 0.7};
  std::vector<const Utterance*> batch = {&corpus.utterances[0], &corpus.utterances[1]};
  const auto b = batch_gradient(model, batch, {0, 0}, false, 1);
  for (std::size_t l = 0; l < model.encoder.layers.size(); ++l) {
    for (std::size_t k = 0; k < model.encoder.layers[l].weight.size(); ++k)
      EXPECT_DOUBLE_EQ(b.grad.encoder.layers[l].weight.flat()[k],
                       model.config.l2 * model.encoder.layers[l].weight.flat()[k]);
    for (double v : b.grad.encoder.layers[l].bias) EXPECT_EQ(v, 0.0);
  }
  EXPECT_NE(b.grad.tm.logits[0], 0.0);
}

TEST(UtteranceGradient, InfeasibleUtterancesAreCounted) {
  auto [model, corpus] = verify::tiny_model(TransitionKind::speech_silence, 3);
  Utterance short_utt{"short", MatrixD(2, 4, 0.5), {1, 2}};  // S = 4 > T = 2
  std::vector<const Utterance*> batch = {&corpus.utterances[0], &short_utt};
  const auto b = batch_gradient(model, batch, {0, 0}, true, 1);
  EXPECT_EQ(b.skipped, 1u);
  EXPECT_EQ(b.frames, corpus.utterances[0].features.rows());
}

TEST(Trainer, SilenceOnlyOverfitDecreasesLoss) {
  const auto inv = LabelInventory::make({"a"}, "sil", 1, 1);
  TrainConfig cfg = small_config();
  cfg.hidden = {4};
  cfg.dropout = 0.0;
  Model model = make_model(cfg, inv, 2);
  MatrixD feats(10, 2);
  for (std::size_t t = 0; t < 10; ++t) feats(t, 0) = std::sin(0.7 * t), feats(t, 1) = 1.0;
  StateChain chain;
  chain.states = {{inv.silence_id, 0, 0, true}};

  NAdam opt;
  double prev = INFINITY;
  for (int step = 0; step < 50; ++step) {
    auto enc = encoder_forward(model.encoder_config, model.encoder, feats, false);
    const auto lg = loss_and_grads(gather_log_phi(enc.log_probs, chain),
                                   evaluate(model.tm, chain, 10), cfg.scales);
    EXPECT_LT(lg.loss, prev) << step;
    prev = lg.loss;
    MatrixD d(10, inv.num_labels(), 0.0);
    scatter_add(lg.d_log_phi, chain, d);
    auto g = encoder_backward(model.encoder_config, model.encoder, enc.cache, d);
    auto tg = accumulate_grad(model.tm, chain, lg.xi_loop, lg.xi_fwd, cfg.scales.tm);
    for (double& v : tg.logits) v = -v;
    std::vector<std::span<double>> ps;
    std::vector<std::span<const double>> gs;
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
      ps.push_back(model.encoder.layers[l].weight.flat());
      gs.push_back(g.layers[l].weight.flat());
      ps.push_back(model.encoder.layers[l].bias);
      gs.push_back(g.layers[l].bias);
    }
    ps.push_back(model.tm.logits);
    gs.push_back(tg.logits);
    opt.update(ps, gs, 1e-2);
    ++model.encoder.version;
  }
}

TEST(Trainer, TrainingIsBitReproducibleAcrossThreadCounts) {
  const auto sc = synth_in_memory(small_spec(), 12);
  auto run = [&](std::size_t threads) {
    Model m = make_model(small_config(), sc.corpus.inventory, 4);
    train(m, sc.corpus, threads);
    std::ostringstream os;
    save_checkpoint(os, m);
    return os.str();
  };
  const auto a = run(1), b = run(1), c = run(3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST(Trainer, LossDecreasesAndLogitsStayFinite) {
  const auto sc = synth_in_memory(small_spec(), 24);
  auto cfg = small_config();
  cfg.epochs = 6;
  cfg.dropout = 0.0;
  Model m = make_model(cfg, sc.corpus.inventory, 4);
  std::vector<double> losses;
  train(m, sc.corpus, 1, [&](const EpochReport& r) {
    losses.push_back(r.loss_per_frame);
    for (double l : m.tm.logits) EXPECT_TRUE(std::isfinite(l));
  });
  ASSERT_EQ(losses.size(), 6u);
  for (std::size_t e = 1; e < losses.size(); ++e) EXPECT_LE(losses[e], losses[e - 1] + 1e-3) << e;
  EXPECT_LT(losses.back(), losses.front());
}

TEST(Trainer, FixedKindNeverUpdatesTransitions) {
  const auto sc = synth_in_memory(small_spec(), 8);
  auto cfg = small_config();
  cfg.tm_kind = TransitionKind::fixed;
  cfg.tm_init = InitStrategy::guessed;
  Model m = make_model(cfg, sc.corpus.inventory, 4);
  const auto before = m.tm;
  const auto enc_before = m.encoder;
  train(m, sc.corpus);
  EXPECT_EQ(m.tm, before);
  EXPECT_NE(m.encoder, enc_before);
}

TEST(Pretrain, PlainKeepsGuessedTransitionsBitIdentical) {
  const auto sc = synth_in_memory(small_spec(), 8);
  auto cfg = small_config();
  cfg.tm_init = InitStrategy::random;
  Model m = make_model(cfg, sc.corpus.inventory, 4);
  pretrain(m, sc.corpus, 2, PretrainMode::plain);
  const auto guessed = init_params(cfg.tm_kind, m.inventory, InitStrategy::guessed, 0);
  EXPECT_EQ(m.tm.logits, guessed.logits);
  EXPECT_TRUE(m.log_prior.empty());
}

TEST(Pretrain, ZeroEpochsLeavesModelUnchanged) {
  const auto sc = synth_in_memory(small_spec(), 4);
  Model m = make_model(small_config(), sc.corpus.inventory, 4);
  const auto before = m;
  pretrain(m, sc.corpus, 0, PretrainMode::with_prior);
  EXPECT_EQ(m, before);
}

TEST(Pretrain, PriorFlattensMajorityLabelOccupancy) {
  // Label "a" dominates the transcriptions; emissions overlap heavily.
  const auto g = small_spec("weight.a = 8\n", 0.6);
  const auto sc = synth_in_memory(g, 40);
  auto cfg = small_config();
  cfg.dropout = 0.0;
  cfg.prior_scale = 0.6;
  const LabelId majority = sc.corpus.inventory.table.at("a");

  auto peaked_fraction = [&](PretrainMode mode) {
    Model m = make_model(cfg, sc.corpus.inventory, 4);
    pretrain(m, sc.corpus, 3, mode);
    std::size_t frames = 0, peaked = 0;
    for (const auto& u : sc.corpus.utterances) {
      const auto L = build_lattice(m, u);
      const auto st = forward_backward(L.log_phi, L.field, m.config.scales);
      for (std::size_t t = 0; t < st.gamma.rows(); ++t) {
        double mass = 0.0;
        for (std::size_t s = 0; s < L.chain.size(); ++s)
          if (L.chain[s].label == majority) mass += st.gamma(t, s);
        frames += mass > 0.0;
        peaked += mass > 0.99;
      }
    }
    return static_cast<double>(peaked) / static_cast<double>(frames);
  };
  EXPECT_LT(peaked_fraction(PretrainMode::with_prior), peaked_fraction(PretrainMode::plain));
}

TEST(EstimatePrior, Properties) {
  const auto sc = synth_in_memory(small_spec(), 10);
  Model m = make_model(small_config(), sc.corpus.inventory, 4);
  for (auto src : {PriorSource::occupancy, PriorSource::posterior}) {
    const auto p = estimate_prior(sc.corpus, m, src);
    double sum = 0.0;
    for (double v : p) {
      sum += v;
      EXPECT_GE(v, 1e-9);
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
  // Uniform posteriors give a uniform posterior-average prior.
  m.encoder = zero_like(m.encoder);
  for (double v : estimate_prior(sc.corpus, m, PriorSource::posterior)) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(EstimatePrior, SingleLabelCorpusIsNearlyOneHot) {
  const auto g = small_spec("weight.b = 0\nweight.c = 0\npf.silence = 0.9\n");
  const auto sc = synth_in_memory(g, 6);
  Model m = make_model(small_config(), sc.corpus.inventory, 4);
  const auto p = estimate_prior(sc.corpus, m, PriorSource::occupancy);
  const auto a = sc.corpus.inventory.table.at("a");
  EXPECT_GT(p[a], 0.7);
  EXPECT_LT(p[sc.corpus.inventory.table.at("b")], 1e-7);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto sc = synth_in_memory(small_spec(), 6);
  auto cfg = small_config();
  cfg.tm_kind = TransitionKind::full_input;
  Model m = make_model(cfg, sc.corpus.inventory, 4);
  train(m, sc.corpus);
  m.log_prior = log_of(estimate_prior(sc.corpus, m));
  std::stringstream ss;
  save_checkpoint(ss, m);
  const auto bytes = ss.str();
  const auto back = load_checkpoint(ss);
  EXPECT_EQ(back, m);
  std::ostringstream again;
  save_checkpoint(again, back);
  EXPECT_EQ(again.str(), bytes);
}

TEST(Checkpoint, RejectsCorruption) {
  auto [model, corpus] = verify::tiny_model(TransitionKind::speech_silence, 1);
  std::ostringstream os;
  save_checkpoint(os, model);
  const auto bytes = os.str();
  std::istringstream bad_magic("XXXXXXXX" + bytes.substr(8));
  EXPECT_THROW(load_checkpoint(bad_magic), std::runtime_error);
  auto wrong_version = bytes;
  wrong_version[8] = 9;
  std::istringstream v(wrong_version);
  EXPECT_THROW(load_checkpoint(v), std::runtime_error);
  std::istringstream truncated(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_checkpoint(truncated), std::runtime_error);
}
