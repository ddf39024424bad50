#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "nhmm/fullsum_lattice.hpp"
#include "nhmm/label_topology.hpp"

namespace nhmm {

struct AlignedFrame {
  std::uint32_t state_pos = 1;  // 1-based chain position
  LabelId label = 0;
  std::uint32_t substate = 0;

  friend bool operator==(const AlignedFrame&, const AlignedFrame&) = default;
};

/// One label occurrence spanning frames [start, end] (inclusive, 0-based).
struct Segment {
  LabelId label = 0;
  std::size_t start = 0;
  std::size_t end = 0;

  friend bool operator==(const Segment&, const Segment&) = default;
};

struct Alignment {
  std::string utt_id;
  std::vector<AlignedFrame> frames;

  std::size_t num_frames() const noexcept { return frames.size(); }

  /// Merges consecutive frames of the same label occurrence. A new occurrence
  /// starts when the label changes or the chain moves into substate 0.
  std::vector<Segment> segments() const {
    std::vector<Segment> out;
    for (std::size_t t = 0; t < frames.size(); ++t) {
      const auto& f = frames[t];
      const bool boundary = t == 0 || f.label != frames[t - 1].label ||
                            (f.state_pos != frames[t - 1].state_pos && f.substate == 0);
      if (boundary)
        out.push_back({f.label, t, t});
      else
        out.back().end = t;
    }
    return out;
  }

  /// Checks the monotone-path invariants; `states` pins the final position.
  void validate(std::optional<std::size_t> states = std::nullopt) const {
    if (frames.empty()) throw std::invalid_argument("alignment '" + utt_id + "' is empty");
    if (frames.front().state_pos != 1)
      throw std::invalid_argument("alignment '" + utt_id + "' does not start at state 1");
    for (std::size_t t = 1; t < frames.size(); ++t) {
      const auto a = frames[t - 1].state_pos, b = frames[t].state_pos;
      if (b != a && b != a + 1)
        throw std::invalid_argument("alignment '" + utt_id + "' skips or reverses states at frame " +
                                    std::to_string(t));
    }
    if (states && frames.back().state_pos != *states)
      throw std::invalid_argument("alignment '" + utt_id + "' does not end in the final state");
  }

  friend bool operator==(const Alignment&, const Alignment&) = default;
};

/// Turns a 0-based state path over `chain` into an alignment.
inline Alignment alignment_from_path(std::string utt_id, const std::vector<std::size_t>& path,
                                     const StateChain& chain) {
  Alignment a;
  a.utt_id = std::move(utt_id);
  a.frames.reserve(path.size());
  for (std::size_t s : path)
    a.frames.push_back({static_cast<std::uint32_t>(s + 1), chain[s].label, chain[s].substate});
  return a;
}

struct ViterbiResult {
  Alignment alignment;
  std::vector<std::size_t> path;  // 0-based chain indices
  double log_score = 0.0;
};

/// Best monotone path under the scaled model. Emission score per cell is
/// lpm * log_phi - prior_scale * log_prior[label]. On exact ties the loop arc
/// wins over the forward arc.
inline ViterbiResult viterbi_align(const MatrixD& log_phi, const TransitionField& field,
                                   const Scales& scales, const StateChain& chain,
                                   std::string utt_id = {},
                                   std::span<const double> log_prior = {},
                                   double prior_scale = 0.0) {
  detail::validate_lattice_inputs(log_phi, field, scales);
  const std::size_t T = log_phi.rows(), S = log_phi.cols();
  if (chain.size() != S) throw std::invalid_argument("chain does not match posterior matrix");
  if (!log_prior.empty() && !(prior_scale >= 0.0))
    throw std::invalid_argument("prior scale must be non-negative");

  auto emission = [&](std::size_t t, std::size_t s) {
    double e = scales.lpm * log_phi(t, s);
    if (!log_prior.empty() && prior_scale != 0.0) e -= prior_scale * log_prior[chain[s].label];
    return e;
  };

  MatrixD score(T, S, kLogZero);
  Matrix<std::uint8_t> came_forward(T, S, 0);
  score(0, 0) = emission(0, 0);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    const std::size_t hi = std::min(S, t + 2);
    for (std::size_t s = 0; s < hi; ++s) {
      const double loop = score(t, s) + scales.tm * field.log_loop(t + 1, s);
      double best = loop;
      if (s > 0) {
        const double fwd = score(t, s - 1) + scales.tm * field.log_forward(t + 1, s - 1);
        if (fwd > loop) {
          best = fwd;
          came_forward(t + 1, s) = 1;
        }
      }
      score(t + 1, s) = best == kLogZero ? kLogZero : best + emission(t + 1, s);
    }
  }

  ViterbiResult out;
  out.log_score = score(T - 1, S - 1);
  out.path.assign(T, 0);
  std::size_t s = S - 1;
  for (std::size_t t = T; t-- > 0;) {
    out.path[t] = s;
    if (t > 0 && came_forward(t, s)) --s;
  }
  out.alignment = alignment_from_path(std::move(utt_id), out.path, chain);
  return out;
}

/// Sum of per-segment boundary displacements, (|d_start| + |d_end|) / 2, in
/// frames. Empty when the two label-segment sequences differ.
struct BoundaryDisplacement {
  double total = 0.0;
  std::size_t segments = 0;
};

inline std::optional<BoundaryDisplacement> boundary_displacement(const Alignment& hyp,
                                                                 const Alignment& ref) {
  const auto hs = hyp.segments(), rs = ref.segments();
  if (hs.size() != rs.size()) return std::nullopt;
  BoundaryDisplacement d;
  for (std::size_t i = 0; i < hs.size(); ++i) {
    if (hs[i].label != rs[i].label) return std::nullopt;
    const double ds = std::abs(static_cast<double>(hs[i].start) - static_cast<double>(rs[i].start));
    const double de = std::abs(static_cast<double>(hs[i].end) - static_cast<double>(rs[i].end));
    d.total += 0.5 * (ds + de);
  }
  d.segments = hs.size();
  return d;
}

class PronunciationMismatch : public std::invalid_argument {
 public:
  explicit PronunciationMismatch(const std::string& utt)
      : std::invalid_argument("label segments differ for utterance '" + utt + "'") {}
};

/// Time stamp error of one utterance in frames.
inline double tse(const Alignment& hyp, const Alignment& ref) {
  auto d = boundary_displacement(hyp, ref);
  if (!d) throw PronunciationMismatch(ref.utt_id);
  return d->segments == 0 ? 0.0 : d->total / static_cast<double>(d->segments);
}

struct CorpusTse {
  double tse_frames = 0.0;
  std::size_t segments = 0;
  std::size_t compared_utts = 0;
  std::size_t skipped_utts = 0;
};

/// Averages over all segments of all comparable utterances. Hypotheses
/// without a reference or with a different pronunciation are skipped.
inline CorpusTse corpus_tse(const std::vector<Alignment>& hyps, const std::vector<Alignment>& refs) {
  std::unordered_map<std::string, const Alignment*> by_id;
  for (const auto& r : refs) by_id.emplace(r.utt_id, &r);
  CorpusTse out;
  double total = 0.0;
  for (const auto& h : hyps) {
    auto it = by_id.find(h.utt_id);
    std::optional<BoundaryDisplacement> d;
    if (it != by_id.end()) d = boundary_displacement(h, *it->second);
    if (!d) {
      ++out.skipped_utts;
      continue;
    }
    total += d->total;
    out.segments += d->segments;
    ++out.compared_utts;
  }
  if (out.segments > 0) out.tse_frames = total / static_cast<double>(out.segments);
  return out;
}

// Alignment TSV: header line, then utt_id, frame (0-based), state_pos (1-based),
// label token, substate.

inline constexpr const char* kAlignmentHeader = "utt_id\tframe\tstate_pos\tlabel\tsubstate";

inline void write_alignment_tsv(std::ostream& os, const std::vector<Alignment>& alignments,
                                const LabelTable& labels) {
  os << kAlignmentHeader << '\n';
  for (const auto& a : alignments)
    for (std::size_t t = 0; t < a.frames.size(); ++t) {
      const auto& f = a.frames[t];
      os << a.utt_id << '\t' << t << '\t' << f.state_pos << '\t' << labels.name(f.label) << '\t'
         << f.substate << '\n';
    }
}

/// Reads alignments in file order. Unknown label tokens are added to
/// `labels` when `intern_new` is set and rejected otherwise.
inline std::vector<Alignment> read_alignment_tsv(std::istream& is, LabelTable& labels,
                                                 bool intern_new = false) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("alignment file is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kAlignmentHeader) throw std::runtime_error("alignment file has a bad header");

  std::vector<Alignment> out;
  std::unordered_map<std::string, std::size_t> seen;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string utt, label;
    long long frame = -1, pos = -1, sub = -1;
    if (!std::getline(fields, utt, '\t') || !(fields >> frame >> pos >> label >> sub) || frame < 0 ||
        pos < 1 || sub < 0)
      throw std::runtime_error("malformed alignment line " + std::to_string(lineno));
    if (out.empty() || out.back().utt_id != utt) {
      if (seen.count(utt))
        throw std::runtime_error("utterance '" + utt + "' is not contiguous in alignment file");
      seen.emplace(utt, out.size());
      out.push_back({utt, {}});
    }
    auto& a = out.back();
    if (static_cast<std::size_t>(frame) != a.frames.size())
      throw std::runtime_error("frames out of order at alignment line " + std::to_string(lineno));
    const LabelId id = intern_new ? labels.intern(label) : labels.at(label);
    a.frames.push_back({static_cast<std::uint32_t>(pos), id, static_cast<std::uint32_t>(sub)});
  }
  for (const auto& a : out) a.validate();
  return out;
}

struct SoftAlignmentCell {
  std::size_t frame = 0;
  std::size_t state_pos = 1;
  double gamma = 0.0;
};

/// Dense (t, s, gamma) table, frame-major, states 1-based.
inline std::vector<SoftAlignmentCell> dump_soft_alignment(const MatrixD& gamma) {
  std::vector<SoftAlignmentCell> out;
  out.reserve(gamma.size());
  for (std::size_t t = 0; t < gamma.rows(); ++t)
    for (std::size_t s = 0; s < gamma.cols(); ++s) out.push_back({t, s + 1, gamma(t, s)});
  return out;
}

inline void write_soft_alignment_tsv(std::ostream& os, const std::vector<SoftAlignmentCell>& cells) {
  os << "frame\tstate_pos\tgamma\n";
  os << std::setprecision(9);
  for (const auto& c : cells) os << c.frame << '\t' << c.state_pos << '\t' << c.gamma << '\n';
}

}  // namespace nhmm
