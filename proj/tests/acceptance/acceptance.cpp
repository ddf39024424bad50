// Acceptance suite: one PASS/FAIL line per criterion, exit code 1 if any fails.
//
//   acceptance --nhmm PATH_TO_CLI [--only N]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "nhmm/nhmm.hpp"
#include "nhmm/verification.hpp"

namespace fs = std::filesystem;
using namespace nhmm;

namespace {

// Tolerances and budgets.
constexpr std::size_t kOracleInstances = 1000;
constexpr double kOracleLikelihoodTol = 1e-10;
constexpr double kOracleMarginalTol = 1e-9;
constexpr double kOracleSeconds = 30.0;
constexpr double kLatticeGradTol = 1e-5;
constexpr double kModelGradTol = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr double kNormalizationTol = 1e-8;
constexpr double kDegenerationTol = 1e-10;
constexpr std::size_t kDegenerationInstances = 1000;
constexpr double kSpeechTarget = 1.0 / 3.0;
constexpr double kSpeechWindow = 0.10;
constexpr double kSilenceCeiling = 0.10;
constexpr std::size_t kMaxEpochs = 20;
constexpr double kTransitionSeconds = 600.0;
constexpr std::size_t kViterbiInstances = 500;
constexpr double kViterbiSlack = 1e-12;

// Synthetic corpus with true p_F 1/3 (speech) and 1/40 (silence).
constexpr const char* kCorpusSpec = R"(labels = aa eh iy s t n
silence = sil
substates = 3
silence_substates = 1
pf.speech = 0.3333333333333333
pf.silence = 0.025
feature_dim = 8
emission.std = 1.0
emission.separation = 1.0
emission.substate_offset = 1.0
min_labels = 2
max_labels = 5
max_frames = 400
seed = 7
)";
constexpr std::size_t kCorpusUtterances = 200;

constexpr const char* kTrainConfig = R"(encoder.context = 2
encoder.hidden = 32
encoder.activation = tanh
tm.kind = speech_silence
tm.init = flat
scales.lpm = 0.3
scales.tm = 0.3
lr.min = 1e-4
lr.max = 0.05
lr.cycle_fraction = 0.8
l2 = 1e-4
dropout = 0.0
epochs = 15
batch_size = 8
seed = 1
)";

// Heavily overlapping emissions for the scale-sensitivity run.
constexpr const char* kHardSpec = R"(labels = aa eh iy s t n
substates = 3
feature_dim = 8
emission.std = 1.5
emission.separation = 0.5
emission.substate_offset = 0.5
seed = 13
)";

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

GenerativeSpec parse_spec(const char* text) {
  std::istringstream in(text);
  auto kv = KeyValueConfig::parse(in, "spec");
  auto g = parse_generative_spec(kv);
  kv.finish();
  return g;
}

TrainConfig parse_config(const std::string& text) {
  std::istringstream in(text);
  auto kv = KeyValueConfig::parse(in, "train config");
  auto c = parse_train_config(kv);
  kv.finish();
  return c;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome criterion1(const verify::OracleReport& o) {
  const bool ok = o.instances >= kOracleInstances && o.max_log_likelihood_error <= kOracleLikelihoodTol &&
                  o.max_gamma_error <= kOracleMarginalTol && o.max_xi_error <= kOracleMarginalTol &&
                  o.seconds < kOracleSeconds;
  return {ok, fmt("instances=%zu max|dLL|=%.2e max|dgamma|=%.2e max|dxi|=%.2e time=%.2fs", o.instances,
                  o.max_log_likelihood_error, o.max_gamma_error, o.max_xi_error, o.seconds)};
}

Outcome criterion2() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto lp = verify::check_log_phi_gradient(100, 202);
  double tm_err = 0.0;
  std::size_t tm_checked = 0;
  std::string per_kind;
  for (auto kind : {TransitionKind::speech_silence, TransitionKind::substate_silence, TransitionKind::full,
                    TransitionKind::full_input}) {
    const auto r = verify::check_transition_gradient(kind, 100, 303);
    tm_err = std::max(tm_err, r.max_relative_error);
    tm_checked += r.checked;
    per_kind += fmt(" %s=%.1e", std::string(to_string(kind)).c_str(), r.max_relative_error);
  }
  verify::GradientReport model;
  for (auto kind : {TransitionKind::speech_silence, TransitionKind::substate_silence, TransitionKind::full,
                    TransitionKind::full_input})
    for (std::uint64_t seed = 1; seed <= 3; ++seed) model.merge(verify::check_model_gradient(kind, seed));
  const double secs = seconds_since(t0);
  const bool ok = lp.max_relative_error <= kLatticeGradTol && tm_err <= kLatticeGradTol &&
                  model.max_relative_error <= kModelGradTol && secs < kGradSeconds;
  return {ok, fmt("(a) log_phi n=%zu rel=%.2e; (b) logits n=%zu rel=%.2e [%s ]; (c) model n=%zu rel=%.2e; "
                  "time=%.2fs",
                  lp.checked, lp.max_relative_error, tm_checked, tm_err, per_kind.c_str() + 1, model.checked,
                  model.max_relative_error, secs)};
}

Outcome criterion3(const verify::OracleReport& o) {
  return {o.max_normalization_error <= kNormalizationTol,
          fmt("instances=%zu max normalization error=%.2e", o.instances, o.max_normalization_error)};
}

Outcome criterion4() {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> logc(-6.0, 0.0);
  double gamma_err = 0.0, grad_err = 0.0, ll_err = 0.0;
  for (std::size_t i = 0; i < kDegenerationInstances; ++i) {
    const auto in = verify::random_instance(rng);
    const std::size_t T = in.log_phi.rows(), S = in.log_phi.cols();
    const double c1 = logc(rng), c2 = logc(rng);
    const auto a = loss_and_grads(in.log_phi, TransitionField::constant(T, S, c1), in.scales);
    const auto b = loss_and_grads(in.log_phi, TransitionField::constant(T, S, c2), in.scales);
    gamma_err = std::max(gamma_err, verify::max_abs_diff(a.gamma, b.gamma));
    grad_err = std::max(grad_err, verify::max_abs_diff(a.d_log_phi, b.d_log_phi));
    const double expected = in.scales.tm * static_cast<double>(T - 1) * (c2 - c1);
    ll_err = std::max(ll_err, std::abs((a.loss - b.loss) - expected));
  }
  const bool ok = gamma_err <= kDegenerationTol && grad_err <= kDegenerationTol && ll_err <= kDegenerationTol;
  return {ok, fmt("instances=%zu max|dgamma|=%.2e max|d grad|=%.2e max|LL shift error|=%.2e",
                  kDegenerationInstances, gamma_err, grad_err, ll_err)};
}

struct TrainingTrace {
  std::vector<double> tse;  // after each epoch
  std::vector<double> loss;
  double pf_speech = 0.0, pf_silence = 0.0;
  double seconds = 0.0;
};

TrainingTrace train_with_tse(const SynthCorpus& sc, TrainConfig cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  Model m = make_model(cfg, sc.corpus.inventory, sc.corpus.utterances.front().features.cols());
  Trainer trainer(m, cfg.epochs * steps_per_epoch(sc.corpus, cfg.batch_size));
  TrainingTrace tr;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    tr.loss.push_back(trainer.train_epoch(sc.corpus, e).loss_per_frame);
    const auto al = align_corpus(m, sc.corpus, 0.0);
    tr.tse.push_back(corpus_tse(al.alignments, sc.references).tse_frames);
  }
  tr.pf_speech = sigmoid(m.tm.logits[0]);
  tr.pf_silence = sigmoid(m.tm.logits[1]);
  tr.seconds = seconds_since(t0);
  return tr;
}

Outcome criterion5(const TrainingTrace& learned, std::size_t epochs) {
  const bool ok = std::abs(learned.pf_speech - kSpeechTarget) <= kSpeechWindow &&
                  learned.pf_silence < kSilenceCeiling && epochs <= kMaxEpochs &&
                  learned.seconds < kTransitionSeconds;
  return {ok, fmt("epochs=%zu learned p_F speech=%.4f (target 0.3333 +/- %.2f) silence=%.4f (< %.2f) "
                  "time=%.1fs",
                  epochs, learned.pf_speech, kSpeechWindow, learned.pf_silence, kSilenceCeiling,
                  learned.seconds)};
}

Outcome criterion6(const TrainingTrace& learned, const TrainingTrace& fixed) {
  const bool ok = learned.tse.back() <= fixed.tse.back() && learned.tse.back() < learned.tse.front() &&
                  fixed.tse.back() < fixed.tse.front();
  return {ok, fmt("TSE frames epoch1->final: trained TM %.3f->%.3f, fixed flat TM %.3f->%.3f",
                  learned.tse.front(), learned.tse.back(), fixed.tse.front(), fixed.tse.back())};
}

Outcome criterion7(const verify::OracleReport& o) {
  const bool ok = o.instances >= kViterbiInstances && o.viterbi_mismatches == 0 &&
                  o.max_viterbi_excess <= kViterbiSlack;
  return {ok, fmt("instances=%zu argmax mismatches=%zu max(score - LL)=%.2e", o.instances,
                  o.viterbi_mismatches, o.max_viterbi_excess)};
}

Outcome criterion8() {
  const auto inv = LabelInventory::make({"A", "B"}, "sil", 1, 1);
  auto three = [&](const std::string& id, LabelId mid, std::size_t b1, std::size_t b2) {
    const auto chain = expand_labels({mid}, inv);
    std::vector<std::size_t> path;
    for (std::size_t t = 0; t < 30; ++t) path.push_back(t < b1 ? 0 : t < b2 ? 1 : 2);
    return alignment_from_path(id, path, chain);
  };
  const auto ref = three("u", 1, 10, 20);
  const double identity = tse(ref, ref);
  const double shifted = tse(three("u", 1, 12, 22), ref);
  const auto corpus = corpus_tse({three("u", 2, 10, 20), three("w", 1, 10, 20)}, {ref});
  bool mismatch_throws = false;
  try {
    tse(three("u", 2, 10, 20), ref);
  } catch (const PronunciationMismatch&) {
    mismatch_throws = true;
  }
  const bool ok = identity == 0.0 && shifted == 4.0 / 3.0 && mismatch_throws && corpus.skipped_utts == 2 &&
                  corpus.compared_utts == 0;
  return {ok, fmt("identity=%.3f shifted=%.17g (expect 4/3) mismatch skipped=%zu", identity, shifted,
                  corpus.skipped_utts)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome criterion9(const std::string& cli) {
  if (cli.empty() || !fs::exists(cli)) return {false, "CLI binary not found (pass --nhmm PATH)"};
  const auto root = fs::temp_directory_path() / ("nhmm_acceptance_" + std::to_string(std::random_device{}()));
  fs::create_directories(root);
  std::ofstream(root / "spec.conf") << kCorpusSpec;
  std::ofstream(root / "train.conf") << std::string(kTrainConfig) << "pretrain.epochs = 1\n";

  auto run_pipeline = [&](const std::string& tag, int threads) {
    const auto dir = root / tag;
    const std::string th = " --threads " + std::to_string(threads);
    const std::string q = " > /dev/null 2>&1";
    const std::vector<std::string> cmds = {
        cli + " synth --spec " + (root / "spec.conf").string() + " --out " + (dir / "corpus").string() +
            " --n 60" + th,
        cli + " train --config " + (root / "train.conf").string() + " --corpus " + (dir / "corpus").string() +
            " --out " + (dir / "model.ckpt").string() + " --pretrain prior" + th,
        cli + " align --ckpt " + (dir / "model.ckpt").string() + " --corpus " + (dir / "corpus").string() +
            " --out " + (dir / "align.tsv").string() + " --prior-scale 0.3" + th};
    for (const auto& c : cmds)
      if (std::system((c + q).c_str()) != 0) return false;
    return true;
  };
  const bool ran = run_pipeline("serial_a", 1) && run_pipeline("serial_b", 1) && run_pipeline("threaded", 3);
  std::size_t files = 0, diffs = 0;
  if (ran) {
    for (const auto& entry : fs::recursive_directory_iterator(root / "serial_a")) {
      if (!entry.is_regular_file()) continue;
      const auto rel = fs::relative(entry.path(), root / "serial_a");
      const auto a = slurp(entry.path());
      ++files;
      diffs += a != slurp(root / "serial_b" / rel);
      diffs += a != slurp(root / "threaded" / rel);
    }
  }
  std::error_code ec;
  fs::remove_all(root, ec);
  return {ran && files > 0 && diffs == 0,
          fmt("pipeline ran=%s files compared=%zu (x2 runs, threads 1 and 3) differing=%zu", ran ? "yes" : "no",
              files, diffs)};
}

Outcome criterion10() {
  const auto g = parse_spec(kHardSpec);
  const auto sc = synth_in_memory(g, 120);
  auto run = [&](double scale) {
    auto cfg = parse_config(kTrainConfig);
    cfg.epochs = 10;
    cfg.scales = {scale, scale};
    struct R {
      bool finite = true;
      double loss = NAN, tse = NAN;
      std::string error;
    } r;
    try {
      const auto tr = train_with_tse(sc, cfg);
      for (double l : tr.loss) r.finite = r.finite && std::isfinite(l);
      r.loss = tr.loss.back();
      r.tse = tr.tse.back();
    } catch (const std::exception& e) {
      r.finite = false;
      r.error = e.what();
    }
    return r;
  };
  const auto base = run(0.3), full = run(1.0);
  std::string high = full.finite ? fmt("completed, final loss/frame=%.4f TSE=%.3f", full.loss, full.tse)
                                 : "diverged (" + full.error + ")";
  if (full.finite && std::isfinite(base.tse))
    high += full.tse > base.tse ? " [worse alignment than (0.3,0.3)]" : " [no alignment degradation]";
  return {base.finite, fmt("(0.3,0.3): %s, final loss/frame=%.4f TSE=%.3f; (1.0,1.0): %s",
                           base.finite ? "no NaN" : "NaN/error", base.loss, base.tse, high.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli;
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--nhmm" && i + 1 < argc)
      cli = argv[++i];
    else if (a == "--only" && i + 1 < argc)
      only = std::atoi(argv[++i]);
    else {
      std::fprintf(stderr, "usage: acceptance --nhmm PATH [--only N]\n");
      return 2;
    }
  }

  int failures = 0;
  auto report = [&](int n, const char* name, const std::function<Outcome()>& fn) {
    if (only && only != n) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %2d %s: %s -- %s\n", n, o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  };

  const bool need_oracle = !only || only == 1 || only == 3 || only == 7;
  verify::OracleReport oracle;
  if (need_oracle) oracle = verify::run_oracle_suite(kOracleInstances, 101);

  report(1, "oracle equivalence", [&] { return criterion1(oracle); });
  report(2, "gradient correctness", criterion2);
  report(3, "normalization invariants", [&] { return criterion3(oracle); });
  report(4, "CTC degeneration", criterion4);

  if (!only || only == 5 || only == 6) {
    const auto sc = synth_in_memory(parse_spec(kCorpusSpec), kCorpusUtterances);
    auto cfg = parse_config(kTrainConfig);
    const auto learned = train_with_tse(sc, cfg);
    cfg.tm_kind = TransitionKind::fixed;
    const auto fixed = train_with_tse(sc, cfg);
    report(5, "transition learning", [&] { return criterion5(learned, cfg.epochs); });
    report(6, "alignment-quality trend", [&] { return criterion6(learned, fixed); });
  }

  report(7, "Viterbi correctness", [&] { return criterion7(oracle); });
  report(8, "TSE metric", criterion8);
  report(9, "determinism", [&] { return criterion9(cli); });
  report(10, "scale sensitivity", criterion10);

  std::printf("%s\n", failures ? "acceptance: FAILED" : "acceptance: all criteria passed");
  return failures ? 1 : 0;
}
