#include "dreamrec/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dreamrec/errors.hpp"
#include "dreamrec/rng.hpp"

namespace dreamrec {

using nlohmann::json;

Vocabulary::Vocabulary(std::vector<std::string> ids) : ids_(std::move(ids)) {
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!lookup_.emplace(ids_[i], static_cast<ItemIndex>(i + 1)).second) {
      throw ContractError("vocabulary: duplicate item id '" + ids_[i] + "'");
    }
  }
}

const std::string& Vocabulary::external(ItemIndex index) const {
  if (index == kPaddingItem || index > ids_.size()) {
    throw ContractError("vocabulary: index " + std::to_string(index) + " out of range");
  }
  return ids_[index - 1];
}

ItemIndex Vocabulary::index(const std::string& external) const {
  const auto it = lookup_.find(external);
  return it == lookup_.end() ? kPaddingItem : it->second;
}

const std::vector<SequenceExample>& SequenceDataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "validation" || name == "valid" || name == "val") return validation;
  if (name == "test") return test;
  throw ContractError("unknown split '" + name + "' (expected train, validation or test)");
}

// ---------------------------------------------------------------------------
// Ingestion

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string_view::npos ? tab : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return out;
}

}  // namespace

InteractionLog parse_interactions(std::istream& in) {
  InteractionLog log;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto fields = split_tabs(line);
    std::int64_t ts = 0;
    bool ok = fields.size() == 3 && !fields[0].empty() && !fields[1].empty() && !fields[2].empty();
    if (ok) {
      const auto* first = fields[2].data();
      const auto* last = first + fields[2].size();
      const auto res = std::from_chars(first, last, ts);
      ok = res.ec == std::errc() && res.ptr == last;
    }
    if (!ok) {
      log.malformed_lines.push_back(number);
      continue;
    }
    log.records.push_back({std::string(fields[0]), std::string(fields[1]), ts});
  }
  return log;
}

InteractionLog ingest_interactions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read interaction log '" + path.string() + "'");
  InteractionLog log = parse_interactions(in);
  if (in.bad()) throw IoError("error while reading '" + path.string() + "'");
  if (log.records.empty()) {
    throw EmptyInputError("interaction log '" + path.string() + "' has no valid records (" +
                          std::to_string(log.malformed_lines.size()) + " malformed lines)");
  }
  return log;
}

void write_interactions(const std::filesystem::path& path, const InteractionLog& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "# user\titem\ttimestamp\n";
  for (const auto& r : log.records) out << r.user << '\t' << r.item << '\t' << r.timestamp << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Sequencing and splitting

std::vector<ItemIndex> pad_window(std::span<const ItemIndex> items, std::size_t window) {
  std::vector<ItemIndex> out(window, kPaddingItem);
  const std::size_t keep = std::min(items.size(), window);
  std::copy(items.end() - static_cast<std::ptrdiff_t>(keep), items.end(),
            out.end() - static_cast<std::ptrdiff_t>(keep));
  return out;
}

std::vector<ItemIndex> flatten_histories(std::span<const SequenceExample> examples) {
  std::vector<ItemIndex> out;
  if (!examples.empty()) out.reserve(examples.size() * examples[0].history.size());
  for (const auto& e : examples) out.insert(out.end(), e.history.begin(), e.history.end());
  return out;
}

SequenceCorpus build_sequences(const InteractionLog& log, const SequenceFilters& filters) {
  if (log.records.empty()) throw EmptyInputError("build_sequences: empty interaction log");
  if (filters.window < 1) throw ContractError("build_sequences: window must be >= 1");
  if (filters.min_seq_len < 2) throw ContractError("build_sequences: min_seq_len must be >= 2");

  std::map<std::string, std::size_t> item_counts;
  for (const auto& r : log.records) ++item_counts[r.item];

  std::vector<std::string> kept_items;
  for (const auto& [item, count] : item_counts) {
    if (count >= filters.min_item_count) kept_items.push_back(item);
  }

  // Per user, surviving interactions in timestamp order (stable for ties).
  std::map<std::string, std::vector<const Interaction*>> by_user;
  const std::set<std::string> kept_set(kept_items.begin(), kept_items.end());
  for (const auto& r : log.records) {
    if (kept_set.count(r.item)) by_user[r.user].push_back(&r);
  }

  // Vocabulary covers items that still appear in some retained sequence.
  std::set<std::string> used;
  for (auto& [user, seq] : by_user) {
    std::stable_sort(seq.begin(), seq.end(), [](const Interaction* a, const Interaction* b) {
      return a->timestamp < b->timestamp;
    });
    if (seq.size() >= filters.min_seq_len) {
      for (const Interaction* r : seq) used.insert(r->item);
    }
  }

  SequenceCorpus corpus;
  corpus.window = filters.window;
  corpus.vocab = Vocabulary(std::vector<std::string>(used.begin(), used.end()));
  for (const auto& [user, seq] : by_user) {
    if (seq.size() < filters.min_seq_len) continue;
    std::vector<ItemIndex> ids;
    ids.reserve(seq.size());
    for (const Interaction* r : seq) ids.push_back(corpus.vocab.index(r->item));
    for (std::size_t n = 1; n < ids.size(); ++n) {
      SequenceExample ex;
      ex.history = pad_window(std::span<const ItemIndex>(ids).first(n), filters.window);
      ex.target = ids[n];
      ex.timestamp = seq[n]->timestamp;
      corpus.examples.push_back(std::move(ex));
    }
  }
  if (corpus.examples.empty()) {
    throw EmptyInputError("build_sequences: every user was filtered out (min_item_count=" +
                          std::to_string(filters.min_item_count) +
                          ", min_seq_len=" + std::to_string(filters.min_seq_len) + ")");
  }
  return corpus;
}

SequenceDataset split_chronological(SequenceCorpus corpus) {
  const std::size_t n = corpus.examples.size();
  if (n < 10) {
    throw ContractError("split_chronological: need at least 10 examples, got " + std::to_string(n));
  }
  std::stable_sort(corpus.examples.begin(), corpus.examples.end(),
                   [](const SequenceExample& a, const SequenceExample& b) {
                     return a.timestamp < b.timestamp;
                   });
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_val = n / 10;
  SequenceDataset ds;
  ds.vocab = std::move(corpus.vocab);
  ds.window = corpus.window;
  auto begin = std::make_move_iterator(corpus.examples.begin());
  ds.train.assign(begin, begin + static_cast<std::ptrdiff_t>(n_train));
  ds.validation.assign(begin + static_cast<std::ptrdiff_t>(n_train),
                       begin + static_cast<std::ptrdiff_t>(n_train + n_val));
  ds.test.assign(begin + static_cast<std::ptrdiff_t>(n_train + n_val),
                 std::make_move_iterator(corpus.examples.end()));
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic data

TransitionLaw TransitionLaw::permutation(std::size_t num_items, std::uint64_t seed) {
  std::vector<ItemIndex> perm(num_items);
  std::iota(perm.begin(), perm.end(), ItemIndex{1});
  Rng rng = Rng::stream(seed, StreamPurpose::kSynthetic, 1, 0);
  for (std::size_t i = num_items; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  TransitionLaw law;
  law.successors.resize(num_items);
  for (std::size_t i = 0; i < num_items; ++i) law.successors[i] = {{perm[i], 1.0}};
  return law;
}

ItemIndex TransitionLaw::mode(ItemIndex item) const {
  const auto& row = successors.at(item - 1);
  ItemIndex best = row.front().first;
  double best_p = row.front().second;
  for (const auto& [next, p] : row) {
    if (p > best_p || (p == best_p && next < best)) {
      best = next;
      best_p = p;
    }
  }
  return best;
}

void TransitionLaw::validate() const {
  for (std::size_t i = 0; i < successors.size(); ++i) {
    const auto& row = successors[i];
    if (row.empty()) throw ContractError("transition law: item " + std::to_string(i + 1) + " has no successor");
    double total = 0.0;
    for (const auto& [next, p] : row) {
      if (next < 1 || next > successors.size() || !(p >= 0.0)) {
        throw ContractError("transition law: bad entry in row " + std::to_string(i + 1));
      }
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw ContractError("transition law: row " + std::to_string(i + 1) + " sums to " +
                          std::to_string(total));
    }
  }
}

void SyntheticSpec::validate() const {
  if (num_items < 2) throw ContractError("synthetic: need at least 2 items");
  if (num_sequences < 1) throw ContractError("synthetic: need at least 1 sequence");
  if (sequence_length < 2) throw ContractError("synthetic: sequence_length must be >= 2");
  if (!(noise >= 0.0 && noise <= 1.0)) throw ContractError("synthetic: noise must lie in [0, 1]");
  if (!law.successors.empty()) {
    if (law.num_items() != num_items) throw ContractError("synthetic: law size != num_items");
    law.validate();
  }
}

TransitionLaw synth_law(const SyntheticSpec& spec) {
  spec.validate();
  return spec.law.successors.empty() ? TransitionLaw::permutation(spec.num_items, spec.seed)
                                     : spec.law;
}

InteractionLog synth_log(const SyntheticSpec& spec) {
  const TransitionLaw law = synth_law(spec);
  const std::size_t width = std::to_string(spec.num_items).size();
  const std::size_t user_width = std::to_string(spec.num_sequences).size();
  auto pad = [](std::size_t v, std::size_t w) {
    std::string s = std::to_string(v);
    return std::string(w - std::min(w, s.size()), '0') + s;
  };

  InteractionLog log;
  log.records.reserve(spec.num_sequences * spec.sequence_length);
  for (std::size_t u = 0; u < spec.num_sequences; ++u) {
    Rng rng = Rng::stream(spec.seed, StreamPurpose::kSynthetic, 2, u);
    const std::string user = "u" + pad(u, user_width);
    std::int64_t ts = static_cast<std::int64_t>(rng.below(1'000'000));
    ItemIndex current = static_cast<ItemIndex>(1 + rng.below(spec.num_items));
    for (std::size_t k = 0; k < spec.sequence_length; ++k) {
      if (k > 0) {
        if (rng.uniform() < spec.noise) {
          current = static_cast<ItemIndex>(1 + rng.below(spec.num_items));
        } else {
          const auto& row = law.successors[current - 1];
          double u01 = rng.uniform();
          ItemIndex next = row.back().first;
          for (const auto& [cand, p] : row) {
            if (u01 < p) {
              next = cand;
              break;
            }
            u01 -= p;
          }
          current = next;
        }
        ts += 1 + static_cast<std::int64_t>(rng.below(1000));
      }
      log.records.push_back({user, "i" + pad(current, width), ts});
    }
  }
  return log;
}

SequenceDataset synth_generate(const SyntheticSpec& spec, const SequenceFilters& filters) {
  return split_chronological(build_sequences(synth_log(spec), filters));
}

// ---------------------------------------------------------------------------
// Cache

namespace {

json encode_examples(const std::vector<SequenceExample>& examples) {
  json out = json::array();
  for (const auto& e : examples) {
    json row = json::array({e.timestamp, e.target});
    for (ItemIndex h : e.history) row.push_back(h);
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<SequenceExample> decode_examples(const json& rows, std::size_t window,
                                             std::size_t num_items, const std::string& where) {
  std::vector<SequenceExample> out;
  for (const auto& row : rows) {
    if (!row.is_array() || row.size() != window + 2) {
      throw FormatError(where + ": example row has wrong length");
    }
    SequenceExample e;
    e.timestamp = row[0].get<std::int64_t>();
    e.target = row[1].get<ItemIndex>();
    for (std::size_t i = 0; i < window; ++i) e.history.push_back(row[i + 2].get<ItemIndex>());
    if (e.target == kPaddingItem || e.target > num_items) {
      throw FormatError(where + ": target index out of range");
    }
    for (ItemIndex h : e.history) {
      if (h > num_items) throw FormatError(where + ": history index out of range");
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

std::string serialize_dataset(const SequenceDataset& ds) {
  json doc;
  doc["format"] = "dreamrec-dataset";
  doc["version"] = kDatasetCacheVersion;
  doc["window"] = ds.window;
  doc["vocabulary"] = ds.vocab.ids();
  doc["train"] = encode_examples(ds.train);
  doc["validation"] = encode_examples(ds.validation);
  doc["test"] = encode_examples(ds.test);
  return doc.dump() + "\n";
}

SequenceDataset deserialize_dataset(const std::string& text, const std::string& source) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(source + ": not valid JSON (" + e.what() + ")");
  }
  try {
    if (doc.value("format", "") != "dreamrec-dataset") {
      throw FormatError(source + ": not a dataset cache");
    }
    if (doc.at("version").get<int>() != kDatasetCacheVersion) {
      throw FormatError(source + ": unsupported dataset cache version");
    }
    SequenceDataset ds;
    ds.window = doc.at("window").get<std::size_t>();
    ds.vocab = Vocabulary(doc.at("vocabulary").get<std::vector<std::string>>());
    ds.train = decode_examples(doc.at("train"), ds.window, ds.vocab.size(), source);
    ds.validation = decode_examples(doc.at("validation"), ds.window, ds.vocab.size(), source);
    ds.test = decode_examples(doc.at("test"), ds.window, ds.vocab.size(), source);
    return ds;
  } catch (const json::exception& e) {
    throw FormatError(source + ": " + e.what());
  }
}

void save_dataset(const std::filesystem::path& path, const SequenceDataset& dataset) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << serialize_dataset(dataset);
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

SequenceDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read dataset cache '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return deserialize_dataset(buffer.str(), path.string());
}

}  // namespace dreamrec
