#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "nhmm/binary_io.hpp"
#include "nhmm/trainer.hpp"

namespace nhmm {

// Binary checkpoint, little-endian throughout. Layout is documented in
// docs/formats.md; bump kCheckpointVersion on any change.

inline constexpr char kCheckpointMagic[8] = {'N', 'H', 'M', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_matrix(std::ostream& os, const MatrixD& m) {
  write_le<std::uint64_t>(os, m.rows());
  write_le<std::uint64_t>(os, m.cols());
  for (double v : m.flat()) write_f64(os, v);
}

inline void write_vector(std::ostream& os, const std::vector<double>& v) {
  write_le<std::uint64_t>(os, v.size());
  for (double x : v) write_f64(os, x);
}

inline std::uint64_t read_count(std::istream& is, std::uint64_t limit = 1ULL << 28) {
  const auto n = read_le<std::uint64_t>(is);
  if (n > limit) throw std::runtime_error("checkpoint: size field out of range");
  return n;
}

inline MatrixD read_matrix(std::istream& is) {
  const auto r = read_count(is), c = read_count(is);
  if (r * c > (1ULL << 28)) throw std::runtime_error("checkpoint: matrix too large");
  MatrixD m(r, c);
  for (double& v : m.flat()) v = read_f64(is);
  return m;
}

inline std::vector<double> read_vector(std::istream& is) {
  std::vector<double> v(read_count(is));
  for (double& x : v) x = read_f64(is);
  return v;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const Model& m) {
  os.write(kCheckpointMagic, 8);
  write_le<std::uint32_t>(os, kCheckpointVersion);

  const auto& inv = m.inventory;
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(inv.num_labels()));
  for (const auto& name : inv.table.names()) write_string(os, name);
  write_le<std::uint32_t>(os, inv.silence_id);
  write_le<std::uint32_t>(os, inv.substates_per_speech_label);
  write_le<std::uint32_t>(os, inv.substates_for_silence);

  write_string(os, format_train_config(m.config));

  const auto& ec = m.encoder_config;
  write_le<std::uint64_t>(os, ec.input_dim);
  write_le<std::uint64_t>(os, ec.context);
  write_le<std::uint64_t>(os, ec.hidden.size());
  for (auto h : ec.hidden) write_le<std::uint64_t>(os, h);
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(ec.activation));
  write_le<std::uint64_t>(os, ec.output_dim);
  write_f64(os, ec.dropout);

  write_le<std::uint64_t>(os, m.encoder.layers.size());
  for (const auto& l : m.encoder.layers) {
    detail::write_matrix(os, l.weight);
    detail::write_vector(os, l.bias);
  }

  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(m.tm.kind));
  detail::write_vector(os, m.tm.logits);
  detail::write_matrix(os, m.tm.weights);

  detail::write_vector(os, m.log_prior);
  write_le<std::uint64_t>(os, m.step);
  write_le<std::uint64_t>(os, m.config.seed);
}

inline Model load_checkpoint(std::istream& is) {
  char magic[8] = {};
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw std::runtime_error("not a checkpoint file (bad magic)");
  const auto version = read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

  Model m;
  const auto n_labels = read_le<std::uint32_t>(is);
  if (n_labels == 0 || n_labels > 1u << 20) throw std::runtime_error("checkpoint: bad label count");
  std::vector<std::string> names;
  for (std::uint32_t i = 0; i < n_labels; ++i) names.push_back(read_string(is));
  m.inventory.table = LabelTable(names);
  m.inventory.silence_id = read_le<std::uint32_t>(is);
  m.inventory.substates_per_speech_label = read_le<std::uint32_t>(is);
  m.inventory.substates_for_silence = read_le<std::uint32_t>(is);
  m.inventory.validate();

  {
    std::istringstream text(read_string(is));
    auto kv = KeyValueConfig::parse(text, "checkpoint config");
    m.config = parse_train_config(kv);
    kv.finish();
  }

  auto& ec = m.encoder_config;
  ec.input_dim = read_le<std::uint64_t>(is);
  ec.context = read_le<std::uint64_t>(is);
  ec.hidden.resize(detail::read_count(is, 1024));
  for (auto& h : ec.hidden) h = read_le<std::uint64_t>(is);
  const auto act = read_le<std::uint8_t>(is);
  if (act > 1) throw std::runtime_error("checkpoint: bad activation");
  ec.activation = static_cast<Activation>(act);
  ec.output_dim = read_le<std::uint64_t>(is);
  ec.dropout = read_f64(is);
  ec.validate();

  const auto n_layers = detail::read_count(is, 1024);
  if (n_layers != ec.hidden.size() + 1) throw std::runtime_error("checkpoint: layer count mismatch");
  for (std::uint64_t i = 0; i < n_layers; ++i) {
    DenseLayer l;
    l.weight = detail::read_matrix(is);
    l.bias = detail::read_vector(is);
    if (l.bias.size() != l.weight.cols()) throw std::runtime_error("checkpoint: bias size mismatch");
    m.encoder.layers.push_back(std::move(l));
  }

  const auto kind = read_le<std::uint8_t>(is);
  if (kind > static_cast<std::uint8_t>(TransitionKind::full_input))
    throw std::runtime_error("checkpoint: bad transition kind");
  m.tm.kind = static_cast<TransitionKind>(kind);
  m.tm.inventory = m.inventory;
  m.tm.logits = detail::read_vector(is);
  m.tm.weights = detail::read_matrix(is);
  if (m.tm.logits.size() != slot_count(m.tm.kind, m.inventory))
    throw std::runtime_error("checkpoint: transition slot count mismatch");

  m.log_prior = detail::read_vector(is);
  if (!m.log_prior.empty() && m.log_prior.size() != m.inventory.num_labels())
    throw std::runtime_error("checkpoint: prior size mismatch");
  m.step = read_le<std::uint64_t>(is);
  if (read_le<std::uint64_t>(is) != m.config.seed) throw std::runtime_error("checkpoint: seed mismatch");
  return m;
}

inline void save_checkpoint(const std::string& path, const Model& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  save_checkpoint(out, m);
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  try {
    return load_checkpoint(in);
  } catch (const TruncatedInput&) {
    throw std::runtime_error("checkpoint " + path + " is truncated");
  }
}

}  // namespace nhmm
