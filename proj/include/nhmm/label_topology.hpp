#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace nhmm {

using LabelId = std::uint32_t;

/// Bidirectional token <-> dense id table.
class LabelTable {
 public:
  LabelTable() = default;
  explicit LabelTable(std::vector<std::string> names) {
    for (auto& n : names) add(n);
  }

  std::size_t size() const noexcept { return names_.size(); }
  const std::string& name(LabelId id) const { return names_.at(id); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  std::optional<LabelId> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  LabelId at(std::string_view token) const {
    if (auto id = find(token)) return *id;
    throw std::invalid_argument("unknown label '" + std::string(token) + "'");
  }

  /// Returns the id of `token`, appending it when absent.
  LabelId intern(std::string_view token) {
    if (auto id = find(token)) return *id;
    return add(std::string(token));
  }

  friend bool operator==(const LabelTable& a, const LabelTable& b) { return a.names_ == b.names_; }

 private:
  LabelId add(const std::string& token) {
    if (token.empty()) throw std::invalid_argument("empty label token");
    if (index_.count(token)) throw std::invalid_argument("duplicate label '" + token + "'");
    const auto id = static_cast<LabelId>(names_.size());
    names_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  std::vector<std::string> names_;
  std::unordered_map<std::string, LabelId> index_;
};

/// Label set with the silence symbol and per-label substate counts.
struct LabelInventory {
  LabelTable table;
  LabelId silence_id = 0;
  std::uint32_t substates_per_speech_label = 3;
  std::uint32_t substates_for_silence = 1;

  std::size_t num_labels() const noexcept { return table.size(); }
  std::size_t num_speech_labels() const noexcept { return table.size() - 1; }
  bool is_silence(LabelId id) const noexcept { return id == silence_id; }
  std::uint32_t substates_of(LabelId id) const noexcept {
    return is_silence(id) ? substates_for_silence : substates_per_speech_label;
  }

  void validate() const {
    if (table.size() == 0) throw std::invalid_argument("label inventory is empty");
    if (silence_id >= table.size())
      throw std::invalid_argument("silence label is not part of the inventory");
    if (substates_per_speech_label < 1 || substates_for_silence < 1)
      throw std::invalid_argument("substate counts must be >= 1");
  }

  /// Inventory of `speech` labels plus a silence label named `silence`, silence first.
  static LabelInventory make(const std::vector<std::string>& speech,
                             const std::string& silence = "sil",
                             std::uint32_t substates = 3, std::uint32_t silence_substates = 1) {
    std::vector<std::string> names{silence};
    names.insert(names.end(), speech.begin(), speech.end());
    LabelInventory inv;
    inv.table = LabelTable(std::move(names));  // rejects duplicates
    inv.silence_id = 0;
    inv.substates_per_speech_label = substates;
    inv.substates_for_silence = silence_substates;
    inv.validate();
    return inv;
  }

  friend bool operator==(const LabelInventory&, const LabelInventory&) = default;
};

struct ChainState {
  LabelId label = 0;
  std::uint32_t substate = 0;
  std::uint32_t block = 0;  // index of the expanded label occurrence
  bool is_silence = false;

  friend bool operator==(const ChainState&, const ChainState&) = default;
};

/// Linear left-to-right HMM over one utterance. Index s (0-based) is chain
/// position s+1; only loop (s->s) and forward (s->s+1) transitions exist.
struct StateChain {
  std::vector<ChainState> states;

  std::size_t size() const noexcept { return states.size(); }
  const ChainState& operator[](std::size_t s) const noexcept { return states[s]; }

  /// Label sequence obtained by merging each block back into one label.
  std::vector<LabelId> collapse() const {
    std::vector<LabelId> out;
    for (std::size_t s = 0; s < states.size(); ++s)
      if (s == 0 || states[s].block != states[s - 1].block) out.push_back(states[s].label);
    return out;
  }

  friend bool operator==(const StateChain&, const StateChain&) = default;
};

enum class SilenceMode { mandatory_ends, none };

inline StateChain expand_labels(const std::vector<LabelId>& labels, const LabelInventory& inventory,
                                SilenceMode silence_mode = SilenceMode::mandatory_ends) {
  inventory.validate();
  if (labels.empty()) throw std::invalid_argument("empty label sequence");
  for (LabelId id : labels) {
    if (id >= inventory.num_labels())
      throw std::invalid_argument("unknown label id " + std::to_string(id));
    if (inventory.is_silence(id))
      throw std::invalid_argument("label sequence must not contain silence");
  }

  StateChain chain;
  std::uint32_t block = 0;
  auto push_block = [&](LabelId id) {
    const bool sil = inventory.is_silence(id);
    for (std::uint32_t k = 0; k < inventory.substates_of(id); ++k)
      chain.states.push_back({id, k, block, sil});
    ++block;
  };
  if (silence_mode == SilenceMode::mandatory_ends) push_block(inventory.silence_id);
  for (LabelId id : labels) push_block(id);
  if (silence_mode == SilenceMode::mandatory_ends) push_block(inventory.silence_id);
  return chain;
}

/// A loop/forward-only path from the first to the last state in T frames exists iff T >= S.
inline bool chain_feasible(const StateChain& chain, std::size_t frames) noexcept {
  return !chain.states.empty() && frames >= chain.size();
}

}  // namespace nhmm
