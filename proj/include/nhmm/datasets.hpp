#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nhmm/alignment.hpp"
#include "nhmm/binary_io.hpp"
#include "nhmm/config.hpp"
#include "nhmm/label_topology.hpp"
#include "nhmm/matrix.hpp"
#include "nhmm/parallel.hpp"
#include "nhmm/random.hpp"

namespace nhmm {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Feature files: "FSF1", u32 frames, u32 dims (little-endian), then
// frames * dims little-endian float32 values, row-major.

inline constexpr char kFeatureMagic[4] = {'F', 'S', 'F', '1'};
inline constexpr std::size_t kFeatureHeaderBytes = 12;

inline void write_features(std::ostream& os, const Matrix<float>& m) {
  if (m.rows() == 0 || m.cols() == 0) throw std::invalid_argument("feature matrix is empty");
  if (m.rows() > UINT32_MAX || m.cols() > UINT32_MAX)
    throw std::invalid_argument("feature matrix too large");
  for (float v : m.flat())
    if (std::isnan(v)) throw std::invalid_argument("feature matrix contains NaN");
  os.write(kFeatureMagic, 4);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  for (float v : m.flat()) write_f32(os, v);
}

inline Matrix<float> read_features(std::istream& is) {
  char magic[4] = {};
  if (!is.read(magic, 4)) throw TruncatedInput();
  if (!std::equal(magic, magic + 4, kFeatureMagic)) throw std::runtime_error("bad feature file magic");
  const auto T = read_le<std::uint32_t>(is);
  const auto D = read_le<std::uint32_t>(is);
  if (T == 0 || D == 0) throw std::runtime_error("feature file has zero frames or dims");
  Matrix<float> m(T, D);
  for (float& v : m.flat()) {
    v = read_f32(is);
    if (std::isnan(v)) throw std::runtime_error("feature file contains NaN");
  }
  return m;
}

inline void write_features(const fs::path& path, const Matrix<float>& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_features(out, m);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline Matrix<float> read_features(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return read_features(in);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

inline MatrixD to_double(const Matrix<float>& m) {
  MatrixD out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out.flat()[i] = m.flat()[i];
  return out;
}

// ---------------------------------------------------------------------------
// Corpus directory: manifest.tsv, inventory.conf, feats/, reference.tsv.

inline constexpr const char* kManifestFile = "manifest.tsv";
inline constexpr const char* kInventoryFile = "inventory.conf";
inline constexpr const char* kReferenceFile = "reference.tsv";

struct ManifestEntry {
  std::string utt_id;
  std::string feature_path;  // relative to the corpus directory
  std::vector<std::string> labels;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

inline void write_manifest(std::ostream& os, const std::vector<ManifestEntry>& entries) {
  for (const auto& e : entries) {
    os << e.utt_id << '\t' << e.feature_path << '\t';
    for (std::size_t i = 0; i < e.labels.size(); ++i) os << (i ? " " : "") << e.labels[i];
    os << '\n';
  }
}

inline std::vector<ManifestEntry> read_manifest(std::istream& is) {
  std::vector<ManifestEntry> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos)
      throw std::runtime_error("manifest line " + std::to_string(lineno) + ": expected 3 tab-separated fields");
    ManifestEntry e{line.substr(0, a), line.substr(a + 1, b - a - 1), {}};
    std::istringstream toks(line.substr(b + 1));
    for (std::string tok; toks >> tok;) e.labels.push_back(tok);
    if (e.utt_id.empty() || e.feature_path.empty() || e.labels.empty())
      throw std::runtime_error("manifest line " + std::to_string(lineno) + ": empty field");
    if (!ids.insert(e.utt_id).second)
      throw std::runtime_error("manifest: duplicate utterance id '" + e.utt_id + "'");
    out.push_back(std::move(e));
  }
  return out;
}

inline void write_inventory(std::ostream& os, const LabelInventory& inv) {
  os << "silence = " << inv.table.name(inv.silence_id) << '\n' << "labels =";
  for (LabelId l = 0; l < inv.num_labels(); ++l)
    if (!inv.is_silence(l)) os << ' ' << inv.table.name(l);
  os << '\n'
     << "substates = " << inv.substates_per_speech_label << '\n'
     << "silence_substates = " << inv.substates_for_silence << '\n';
}

/// Reads the inventory keys from `cfg`; silence gets id 0, speech labels follow.
inline LabelInventory inventory_from_config(KeyValueConfig& cfg) {
  const auto silence = cfg.get_string("silence", "sil");
  const auto labels = cfg.get_list("labels", {});
  if (labels.empty()) throw std::runtime_error("inventory: no speech labels");
  return LabelInventory::make(labels, silence,
                              static_cast<std::uint32_t>(cfg.get_uint("substates", 3)),
                              static_cast<std::uint32_t>(cfg.get_uint("silence_substates", 1)));
}

struct Utterance {
  std::string utt_id;
  MatrixD features;
  std::vector<LabelId> labels;  // without silence
};

struct Corpus {
  LabelInventory inventory;
  std::vector<Utterance> utterances;

  const Utterance* find(const std::string& utt_id) const {
    for (const auto& u : utterances)
      if (u.utt_id == utt_id) return &u;
    return nullptr;
  }
};

inline LabelInventory load_inventory(const fs::path& dir) {
  const auto path = dir / kInventoryFile;
  auto cfg = KeyValueConfig::load(path.string());
  auto inv = inventory_from_config(cfg);
  cfg.finish();
  return inv;
}

inline Corpus load_corpus(const fs::path& dir) {
  Corpus c;
  c.inventory = load_inventory(dir);
  std::ifstream in(dir / kManifestFile);
  if (!in) throw std::runtime_error("cannot open manifest in " + dir.string());
  for (auto& e : read_manifest(in)) {
    const auto path = dir / e.feature_path;
    if (!fs::exists(path)) throw std::runtime_error("missing feature file " + path.string());
    Utterance u{e.utt_id, to_double(read_features(path)), {}};
    for (const auto& tok : e.labels) {
      const auto id = c.inventory.table.find(tok);
      if (!id) throw std::runtime_error("utterance '" + e.utt_id + "': unknown label '" + tok + "'");
      if (c.inventory.is_silence(*id))
        throw std::runtime_error("utterance '" + e.utt_id + "': silence is inserted automatically");
      u.labels.push_back(*id);
    }
    c.utterances.push_back(std::move(u));
  }
  if (c.utterances.empty()) throw std::runtime_error("corpus " + dir.string() + " is empty");
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic corpora from a known generative HMM.

/// Generative model over the `full` slot layout: one forward probability,
/// emission mean, and shared isotropic standard deviation per (label, substate).
struct GenerativeSpec {
  LabelInventory inventory;
  std::vector<double> forward_prob;       // per (label, substate) slot
  std::vector<std::vector<double>> means; // per slot, feature_dim each
  std::vector<double> label_weights;      // sampling weight per label id
  std::size_t feature_dim = 8;
  double stddev = 1.0;
  std::size_t min_labels = 2;
  std::size_t max_labels = 5;
  std::size_t max_frames = 400;
  std::uint64_t seed = 1;

  std::size_t slot(LabelId label, std::uint32_t substate) const {
    std::size_t offset = 0;
    for (LabelId l = 0; l < label; ++l) offset += inventory.substates_of(l);
    return offset + substate;
  }

  void validate() const {
    inventory.validate();
    for (double p : forward_prob)
      if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("forward probabilities must be in (0, 1)");
    if (!(stddev > 0.0)) throw std::invalid_argument("emission std must be > 0");
    if (feature_dim == 0) throw std::invalid_argument("feature_dim must be >= 1");
    if (min_labels < 1 || max_labels < min_labels) throw std::invalid_argument("bad label count range");
    double w = 0.0;
    for (LabelId l = 0; l < inventory.num_labels(); ++l)
      if (!inventory.is_silence(l)) w += label_weights.at(l);
    if (!(w > 0.0)) throw std::invalid_argument("label weights must not all be zero");
  }
};

/// Spec file keys: labels, silence, substates, silence_substates, pf.speech,
/// pf.silence, pf.<label>, weight.<label>, feature_dim, emission.std,
/// emission.separation, emission.substate_offset, min_labels, max_labels,
/// max_frames, seed. Means are drawn from the seed: a label centre
/// ~ N(0, separation^2) per dimension plus a substate offset ~ N(0, offset^2).
inline GenerativeSpec parse_generative_spec(KeyValueConfig& cfg) {
  GenerativeSpec g;
  g.inventory = inventory_from_config(cfg);
  const auto& inv = g.inventory;
  const double pf_speech = cfg.get_double("pf.speech", 1.0 / 3.0);
  const double pf_silence = cfg.get_double("pf.silence", 1.0 / 40.0);
  g.feature_dim = cfg.get_uint("feature_dim", 8);
  g.stddev = cfg.get_double("emission.std", 1.0);
  const double separation = cfg.get_double("emission.separation", 3.0);
  const double offset = cfg.get_double("emission.substate_offset", 0.0);
  g.min_labels = cfg.get_uint("min_labels", 2);
  g.max_labels = cfg.get_uint("max_labels", 5);
  g.max_frames = cfg.get_uint("max_frames", 400);
  g.seed = cfg.get_uint("seed", 1);

  g.label_weights.assign(inv.num_labels(), 1.0);
  g.label_weights[inv.silence_id] = 0.0;
  std::vector<double> label_pf(inv.num_labels(), pf_speech);
  label_pf[inv.silence_id] = pf_silence;
  for (LabelId l = 0; l < inv.num_labels(); ++l) {
    const auto& name = inv.table.name(l);
    if (!inv.is_silence(l)) g.label_weights[l] = cfg.get_double("weight." + name, 1.0);
    label_pf[l] = cfg.get_double("pf." + name, label_pf[l]);
  }

  std::mt19937_64 rng(mix_seed(g.seed, 0xE3155));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (LabelId l = 0; l < inv.num_labels(); ++l) {
    std::vector<double> centre(g.feature_dim);
    for (double& c : centre) c = separation * normal(rng);
    for (std::uint32_t k = 0; k < inv.substates_of(l); ++k) {
      auto m = centre;
      for (double& v : m) v += offset * normal(rng);
      g.means.push_back(std::move(m));
      g.forward_prob.push_back(label_pf[l]);
    }
  }
  g.validate();
  return g;
}

inline GenerativeSpec load_generative_spec(const std::string& path) {
  auto cfg = KeyValueConfig::load(path);
  auto g = parse_generative_spec(cfg);
  cfg.finish();
  return g;
}

/// Geometric durations per chain state, each state left with its forward
/// probability (the final state's exit ends the utterance). Whole paths
/// longer than max_frames are rejected and redrawn.
template <class Rng>
std::vector<std::size_t> sample_state_path(const std::vector<double>& forward_prob,
                                           std::size_t max_frames, Rng& rng,
                                           std::size_t max_attempts = 10000) {
  if (forward_prob.empty() || forward_prob.size() > max_frames)
    throw std::invalid_argument("chain cannot fit into max_frames");
  std::vector<std::size_t> path;
  for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
    path.clear();
    for (std::size_t s = 0; s < forward_prob.size() && path.size() <= max_frames; ++s) {
      std::bernoulli_distribution advance(forward_prob[s]);
      do path.push_back(s);
      while (!advance(rng) && path.size() <= max_frames);
    }
    if (path.size() <= max_frames) return path;
  }
  throw std::runtime_error("could not sample a path within max_frames; spec is degenerate");
}

struct SynthUtterance {
  ManifestEntry entry;
  Matrix<float> features;
  Alignment reference;
};

inline SynthUtterance synth_utterance(const GenerativeSpec& g, std::size_t index) {
  const auto& inv = g.inventory;
  std::mt19937_64 rng(mix_seed(g.seed, index));
  std::uniform_int_distribution<std::size_t> count(g.min_labels, g.max_labels);
  std::discrete_distribution<LabelId> pick(g.label_weights.begin(), g.label_weights.end());

  std::vector<LabelId> labels(count(rng));
  for (auto& l : labels) l = pick(rng);
  const auto chain = expand_labels(labels, inv, SilenceMode::mandatory_ends);

  std::vector<double> pf(chain.size());
  for (std::size_t s = 0; s < chain.size(); ++s)
    pf[s] = g.forward_prob[g.slot(chain[s].label, chain[s].substate)];
  const auto path = sample_state_path(pf, g.max_frames, rng);

  std::normal_distribution<double> noise(0.0, g.stddev);
  Matrix<float> feats(path.size(), g.feature_dim);
  for (std::size_t t = 0; t < path.size(); ++t) {
    const auto& mean = g.means[g.slot(chain[path[t]].label, chain[path[t]].substate)];
    for (std::size_t d = 0; d < g.feature_dim; ++d)
      feats(t, d) = static_cast<float>(mean[d] + noise(rng));
  }

  char id[32];
  std::snprintf(id, sizeof id, "utt%06zu", index);
  SynthUtterance u;
  u.entry.utt_id = id;
  u.entry.feature_path = std::string("feats/") + id + ".fsf";
  for (auto l : labels) u.entry.labels.push_back(inv.table.name(l));
  u.features = std::move(feats);
  u.reference = alignment_from_path(id, path, chain);
  return u;
}

struct SynthResult {
  std::vector<ManifestEntry> manifest;
  std::vector<Alignment> references;
};

struct SynthCorpus {
  Corpus corpus;
  std::vector<Alignment> references;
};

/// Same utterances as `synth_corpus`, kept in memory (features rounded to float).
inline SynthCorpus synth_in_memory(const GenerativeSpec& g, std::size_t n_utterances,
                                   std::size_t threads = 1) {
  g.validate();
  std::vector<SynthUtterance> utts(n_utterances);
  parallel_for(n_utterances, threads, [&](std::size_t i) { utts[i] = synth_utterance(g, i); });
  SynthCorpus r;
  r.corpus.inventory = g.inventory;
  for (auto& u : utts) {
    Utterance utt{u.entry.utt_id, to_double(u.features), {}};
    for (const auto& tok : u.entry.labels) utt.labels.push_back(g.inventory.table.at(tok));
    r.corpus.utterances.push_back(std::move(utt));
    r.references.push_back(std::move(u.reference));
  }
  return r;
}

/// Writes a complete corpus directory. Utterance i depends only on (seed, i).
inline SynthResult synth_corpus(const GenerativeSpec& g, std::size_t n_utterances,
                                const fs::path& out_dir, std::size_t threads = 1) {
  if (n_utterances < 1) throw std::invalid_argument("need at least one utterance");
  g.validate();
  fs::create_directories(out_dir / "feats");

  std::vector<SynthUtterance> utts(n_utterances);
  parallel_for(n_utterances, threads, [&](std::size_t i) {
    utts[i] = synth_utterance(g, i);
    write_features(out_dir / utts[i].entry.feature_path, utts[i].features);
  });

  SynthResult r;
  for (auto& u : utts) {
    r.manifest.push_back(u.entry);
    r.references.push_back(std::move(u.reference));
  }
  auto open = [&](const char* name) {
    std::ofstream f(out_dir / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (out_dir / name).string());
    return f;
  };
  {
    auto f = open(kManifestFile);
    write_manifest(f, r.manifest);
  }
  {
    auto f = open(kInventoryFile);
    write_inventory(f, g.inventory);
  }
  {
    auto f = open(kReferenceFile);
    write_alignment_tsv(f, r.references, g.inventory.table);
  }
  return r;
}

}  // namespace nhmm
