#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dreamrec/types.hpp"

namespace dreamrec {

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;
};

struct InteractionLog {
  std::vector<Interaction> records;
  /// 1-based line numbers of lines that failed to parse.
  std::vector<std::size_t> malformed_lines;
};

/// One next-item example: a left-padded window of history indices and the
/// item that followed, stamped with the target's timestamp.
struct SequenceExample {
  std::vector<ItemIndex> history;
  ItemIndex target = kPaddingItem;
  std::int64_t timestamp = 0;

  friend bool operator==(const SequenceExample&, const SequenceExample&) = default;
};

/// External item ids mapped to dense indices 1..size().
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> ids);

  std::size_t size() const noexcept { return ids_.size(); }
  const std::string& external(ItemIndex index) const;
  /// 0 (padding) when unknown.
  ItemIndex index(const std::string& external) const;
  const std::vector<std::string>& ids() const noexcept { return ids_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.ids_ == b.ids_; }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, ItemIndex> lookup_;
};

/// Examples in pre-split order together with their vocabulary.
struct SequenceCorpus {
  Vocabulary vocab;
  std::size_t window = 10;
  std::vector<SequenceExample> examples;
};

struct SequenceDataset {
  Vocabulary vocab;
  std::size_t window = 10;
  std::vector<SequenceExample> train;
  std::vector<SequenceExample> validation;
  std::vector<SequenceExample> test;

  std::size_t num_items() const noexcept { return vocab.size(); }
  const std::vector<SequenceExample>& split(const std::string& name) const;

  friend bool operator==(const SequenceDataset&, const SequenceDataset&) = default;
};

struct SequenceFilters {
  std::size_t min_item_count = 5;
  std::size_t min_seq_len = 3;
  std::size_t window = 10;
};

/// Parses `user<TAB>item<TAB>timestamp` lines. Blank and '#' lines are
/// skipped; other unparsable lines are recorded and skipped.
InteractionLog parse_interactions(std::istream& in);
InteractionLog ingest_interactions(const std::filesystem::path& path);
void write_interactions(const std::filesystem::path& path, const InteractionLog& log);

/// Item-frequency filter (applied once), per-user chronological ordering,
/// minimum-length filter, then one example per target position >= 2.
/// Vocabulary indices follow the lexicographic order of surviving item ids.
SequenceCorpus build_sequences(const InteractionLog& log, const SequenceFilters& filters = {});

/// Stable sort by timestamp, then floor(0.8 n) train, floor(0.1 n)
/// validation, remainder test.
SequenceDataset split_chronological(SequenceCorpus corpus);

/// Left-pads (or truncates to the most recent) items into a window.
std::vector<ItemIndex> pad_window(std::span<const ItemIndex> items, std::size_t window);

/// Flattens the history windows of a list of examples, back to back.
std::vector<ItemIndex> flatten_histories(std::span<const SequenceExample> examples);

// ---------------------------------------------------------------------------
// Synthetic data with a planted next-item law

/// Row-stochastic transition law over items 1..n. successors[i - 1] lists
/// (next item, probability) for item i.
struct TransitionLaw {
  std::vector<std::vector<std::pair<ItemIndex, double>>> successors;

  static TransitionLaw permutation(std::size_t num_items, std::uint64_t seed);
  std::size_t num_items() const noexcept { return successors.size(); }
  /// Most likely successor of item i (ties to the smaller index).
  ItemIndex mode(ItemIndex item) const;
  void validate() const;
};

struct SyntheticSpec {
  std::size_t num_items = 100;
  std::size_t num_sequences = 500;
  /// Interactions per synthetic user.
  std::size_t sequence_length = 11;
  double noise = 0.1;
  std::uint64_t seed = 0;
  /// Empty means a seeded random permutation.
  TransitionLaw law;

  void validate() const;
};

/// Resolved law of a spec (the seeded permutation when none is given).
TransitionLaw synth_law(const SyntheticSpec& spec);

/// Raw log: first item uniform, then with probability 1 - noise the next
/// item follows the law, otherwise it is uniform over all items. Item ids are
/// zero-padded decimal strings so lexicographic order equals numeric order.
InteractionLog synth_log(const SyntheticSpec& spec);

/// synth_log followed by build_sequences and split_chronological.
SequenceDataset synth_generate(const SyntheticSpec& spec, const SequenceFilters& filters = {});

// ---------------------------------------------------------------------------
// Dataset cache

inline constexpr int kDatasetCacheVersion = 1;

std::string serialize_dataset(const SequenceDataset& dataset);
SequenceDataset deserialize_dataset(const std::string& text, const std::string& source = "dataset");
void save_dataset(const std::filesystem::path& path, const SequenceDataset& dataset);
SequenceDataset load_dataset(const std::filesystem::path& path);

}  // namespace dreamrec
