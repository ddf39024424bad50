#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "nhmm/alignment.hpp"
#include "nhmm/checkpoint.hpp"
#include "nhmm/datasets.hpp"
#include "nhmm/trainer.hpp"
#include "nhmm/verification.hpp"

namespace nhmm::cli {

namespace fs = std::filesystem;

inline constexpr double kFrameShiftMs = 10.0;

// Tolerances enforced by `check`.
inline constexpr double kOracleLikelihoodTol = 1e-10;
inline constexpr double kOracleMarginalTol = 1e-9;
inline constexpr double kNormalizationTol = 1e-8;
inline constexpr double kLatticeGradTol = 1e-5;
inline constexpr double kModelGradTol = 1e-4;

class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::ofstream open_output(const std::string& path) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CommandError("cannot write " + path);
  return f;
}

inline std::vector<Alignment> read_alignment_file(const std::string& path, LabelTable& labels) {
  std::ifstream in(path);
  if (!in) throw CommandError("cannot open " + path);
  try {
    return read_alignment_tsv(in, labels, true);
  } catch (const std::exception& e) {
    throw CommandError(path + ": " + e.what());
  }
}

inline void report_infeasible(const Corpus& corpus, const LabelInventory& inv, std::ostream& err) {
  for (const auto& u : corpus.utterances) {
    const auto chain = expand_labels(u.labels, inv);
    if (!chain_feasible(chain, u.features.rows()))
      err << "warning: skipping infeasible utterance " << u.utt_id << " (T=" << u.features.rows()
          << " < S=" << chain.size() << ")\n";
  }
}

inline void check_inventory(const Model& m, const Corpus& corpus) {
  if (!(m.inventory == corpus.inventory))
    throw CommandError("corpus label inventory does not match the checkpoint");
  if (corpus.utterances.front().features.cols() != m.encoder_config.input_dim)
    throw CommandError("corpus feature dimension does not match the checkpoint");
}

struct SynthArgs {
  std::string spec, out;
  std::size_t n = 0, threads = 1;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const auto g = load_generative_spec(a.spec);
  const auto r = synth_corpus(g, a.n, a.out, a.threads);
  std::size_t frames = 0;
  for (const auto& ref : r.references) frames += ref.frames.size();
  out << "wrote " << r.manifest.size() << " utterances (" << frames << " frames) to " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, corpus, out, pretrain = "none";
  std::size_t threads = 1;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  auto kv = KeyValueConfig::load(a.config);
  const auto cfg = parse_train_config(kv);
  kv.finish();
  const auto mode = parse_pretrain_mode(a.pretrain);
  const auto corpus = load_corpus(a.corpus);
  report_infeasible(corpus, corpus.inventory, err);

  Model model = make_model(cfg, corpus.inventory, corpus.utterances.front().features.cols());
  if (mode != PretrainMode::none) {
    pretrain(model, corpus, cfg.pretrain_epochs, mode, a.threads);
    model.tm = init_params(cfg.tm_kind, model.inventory, cfg.tm_init, mix_seed(cfg.seed, 0x7A),
                           model.encoder_config.top_dim());
    out << "pretrained " << cfg.pretrain_epochs << " epochs (" << a.pretrain << ")\n";
  }
  train(model, corpus, a.threads, [&](const EpochReport& r) {
    char line[128];
    std::snprintf(line, sizeof line, "epoch %zu loss_per_frame=%.6f skipped=%zu\n", r.epoch,
                  r.loss_per_frame, r.skipped);
    out << line << std::flush;
  });
  model.log_prior = log_of(estimate_prior(corpus, model, PriorSource::occupancy, a.threads));
  save_checkpoint(a.out, model);
  out << "saved " << a.out << '\n';
  return 0;
}

struct AlignArgs {
  std::string ckpt, corpus, out;
  double prior_scale = 0.0;
  std::size_t threads = 1;
};

inline int cmd_align(const AlignArgs& a, std::ostream& out, std::ostream& err) {
  if (!(a.prior_scale >= 0.0)) throw CommandError("--prior-scale must be >= 0");
  const auto model = load_checkpoint(a.ckpt);
  const auto corpus = load_corpus(a.corpus);
  check_inventory(model, corpus);
  report_infeasible(corpus, model.inventory, err);
  const auto r = align_corpus(model, corpus, a.prior_scale, a.threads);
  auto f = open_output(a.out);
  write_alignment_tsv(f, r.alignments, model.inventory.table);
  if (!f) throw CommandError("write failed: " + a.out);
  out << "aligned " << r.alignments.size() << " utterances, skipped " << r.skipped.size() << '\n';
  return 0;
}

struct TseArgs {
  std::string hyp, ref;
};

inline int cmd_tse(const TseArgs& a, std::ostream& out) {
  LabelTable labels;
  const auto hyp = read_alignment_file(a.hyp, labels);
  const auto ref = read_alignment_file(a.ref, labels);
  const auto r = corpus_tse(hyp, ref);
  char line[192];
  std::snprintf(line, sizeof line, "tse_frames=%.3f tse_ms=%.3f segments=%zu skipped_utts=%zu\n",
                r.tse_frames, r.tse_frames * kFrameShiftMs, r.segments, r.skipped_utts);
  out << line;
  return 0;
}

inline int cmd_show_tm(const std::string& ckpt, std::ostream& out) {
  const auto model = load_checkpoint(ckpt);
  const auto& tm = model.tm;
  out << "# kind=" << to_string(tm.kind);
  if (tm.kind == TransitionKind::full_input) out << " (bias-implied probabilities)";
  out << "\nslot\tp_F\tp_L\n";
  for (std::size_t k = 0; k < tm.logits.size(); ++k) {
    char line[160];
    std::snprintf(line, sizeof line, "%s\t%.4f\t%.4f\n", slot_name(tm, k).c_str(), sigmoid(tm.logits[k]),
                  sigmoid(-tm.logits[k]));
    out << line;
  }
  return 0;
}

struct CheckArgs {
  std::size_t instances = 1000;
  std::uint64_t seed = 1;
};

inline int cmd_check(const CheckArgs& a, std::ostream& out) {
  char line[256];
  bool ok = true;
  auto verdict = [&](bool pass) {
    ok = ok && pass;
    return pass ? "ok" : "FAIL";
  };

  const auto o = verify::run_oracle_suite(a.instances, a.seed);
  const bool oracle_ok = o.max_log_likelihood_error <= kOracleLikelihoodTol &&
                         o.max_gamma_error <= kOracleMarginalTol && o.max_xi_error <= kOracleMarginalTol;
  std::snprintf(line, sizeof line,
                "oracle instances=%zu max_ll_err=%.3e max_gamma_err=%.3e max_xi_err=%.3e %s\n", o.instances,
                o.max_log_likelihood_error, o.max_gamma_error, o.max_xi_error, verdict(oracle_ok));
  out << line;
  std::snprintf(line, sizeof line, "normalization max_err=%.3e %s\n", o.max_normalization_error,
                verdict(o.max_normalization_error <= kNormalizationTol));
  out << line;
  std::snprintf(line, sizeof line, "viterbi mismatches=%zu max_score_minus_ll=%.3e %s\n", o.viterbi_mismatches,
                o.max_viterbi_excess, verdict(o.viterbi_mismatches == 0 && o.max_viterbi_excess <= 1e-12));
  out << line;

  const std::size_t fd_instances = std::max<std::size_t>(1, a.instances / 20);
  const auto lp = verify::check_log_phi_gradient(fd_instances, a.seed + 1);
  std::snprintf(line, sizeof line, "grad log_phi checked=%zu max_rel_err=%.3e %s\n", lp.checked,
                lp.max_relative_error, verdict(lp.max_relative_error <= kLatticeGradTol));
  out << line;
  for (auto kind : {TransitionKind::speech_silence, TransitionKind::substate_silence, TransitionKind::full,
                    TransitionKind::full_input}) {
    const auto g = verify::check_transition_gradient(kind, fd_instances, a.seed + 2);
    std::snprintf(line, sizeof line, "grad tm.%s checked=%zu max_rel_err=%.3e %s\n",
                  std::string(to_string(kind)).c_str(), g.checked, g.max_relative_error,
                  verdict(g.max_relative_error <= kLatticeGradTol));
    out << line;
  }
  for (auto kind : {TransitionKind::speech_silence, TransitionKind::full_input}) {
    const auto g = verify::check_model_gradient(kind, a.seed + 3);
    std::snprintf(line, sizeof line, "grad model.%s checked=%zu max_rel_err=%.3e %s\n",
                  std::string(to_string(kind)).c_str(), g.checked, g.max_relative_error,
                  verdict(g.max_relative_error <= kModelGradTol));
    out << line;
  }
  out << (ok ? "check passed\n" : "check FAILED\n");
  return ok ? 0 : 1;
}

struct DumpGammaArgs {
  std::string ckpt, corpus, utt, out;
};

inline int cmd_dump_gamma(const DumpGammaArgs& a, std::ostream& out) {
  const auto model = load_checkpoint(a.ckpt);
  const auto corpus = load_corpus(a.corpus);
  check_inventory(model, corpus);
  const auto* u = corpus.find(a.utt);
  if (!u) throw CommandError("utterance '" + a.utt + "' not in corpus");
  UtteranceLattice L;
  try {
    L = build_lattice(model, *u);
  } catch (const InfeasibleChain& e) {
    throw CommandError("utterance '" + a.utt + "' is infeasible: " + e.what());
  }
  const auto st = forward_backward(L.log_phi, L.field, model.config.scales);
  auto f = open_output(a.out);
  write_soft_alignment_tsv(f, dump_soft_alignment(st.gamma));
  if (!f) throw CommandError("write failed: " + a.out);
  out << "log_likelihood=" << st.log_likelihood << " frames=" << st.gamma.rows()
      << " states=" << st.gamma.cols() << '\n';
  return 0;
}

/// Runs one command line (without the program name). Returns the exit code.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Neural HMM trainer and forced aligner"};
  app.name("nhmm");
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Print help for all subcommands");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic corpus with reference alignments");
  s->add_option("--spec", synth.spec, "Generative spec file")->required()->check(CLI::ExistingFile);
  s->add_option("--out", synth.out, "Output corpus directory")->required();
  s->add_option("--n", synth.n, "Number of utterances")->required()->check(CLI::PositiveNumber);
  s->add_option("--threads", synth.threads, "Worker threads")->check(CLI::PositiveNumber);

  TrainArgs train_args;
  auto* t = app.add_subcommand("train", "Train encoder and transition model");
  t->add_option("--config", train_args.config, "Training config file")->required()->check(CLI::ExistingFile);
  t->add_option("--corpus", train_args.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--out", train_args.out, "Output checkpoint")->required();
  t->add_option("--pretrain", train_args.pretrain, "Pretraining mode")
      ->check(CLI::IsMember({"none", "plain", "prior"}));
  t->add_option("--threads", train_args.threads, "Worker threads")->check(CLI::PositiveNumber);

  AlignArgs align;
  auto* al = app.add_subcommand("align", "Viterbi forced alignment of a corpus");
  al->add_option("--ckpt", align.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  al->add_option("--corpus", align.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  al->add_option("--out", align.out, "Output alignment TSV")->required();
  al->add_option("--prior-scale", align.prior_scale, "Prior correction exponent (0 disables)");
  al->add_option("--threads", align.threads, "Worker threads")->check(CLI::PositiveNumber);

  TseArgs tse_args;
  auto* ts = app.add_subcommand("tse", "Time-stamp error between two alignment files");
  ts->add_option("--hyp", tse_args.hyp, "Hypothesis alignment TSV")->required()->check(CLI::ExistingFile);
  ts->add_option("--ref", tse_args.ref, "Reference alignment TSV")->required()->check(CLI::ExistingFile);

  std::string show_ckpt;
  auto* sh = app.add_subcommand("show-tm", "Print transition probabilities of a checkpoint");
  sh->add_option("--ckpt", show_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);

  CheckArgs check;
  auto* c = app.add_subcommand("check", "Run oracle and finite-difference verification suites");
  c->add_option("--instances", check.instances, "Random oracle instances")->check(CLI::PositiveNumber);
  c->add_option("--seed", check.seed, "Random seed");

  DumpGammaArgs dump;
  auto* d = app.add_subcommand("dump-gamma", "Write state occupancies of one utterance");
  d->add_option("--ckpt", dump.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  d->add_option("--corpus", dump.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  d->add_option("--utt", dump.utt, "Utterance id")->required();
  d->add_option("--out", dump.out, "Output TSV")->required();

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "nhmm: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*s) return cmd_synth(synth, out);
    if (*t) return cmd_train(train_args, out, err);
    if (*al) return cmd_align(align, out, err);
    if (*ts) return cmd_tse(tse_args, out);
    if (*sh) return cmd_show_tm(show_ckpt, out);
    if (*c) return cmd_check(check, out);
    if (*d) return cmd_dump_gamma(dump, out);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "nhmm: " << msg << '\n';
    return 1;
  }
  return 1;
}

}  // namespace nhmm::cli
