#include "dreamrec/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include "dreamrec/errors.hpp"

namespace dreamrec {

using num::Tensor;

std::optional<std::size_t> RankedList::rank_of(ItemIndex item) const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i] == item) return i + 1;
  }
  return std::nullopt;
}

template <typename Real>
RankedList retrieve_topk(std::span<const Real> oracle, const ItemEmbeddingTable<Real>& table,
                         std::size_t k, std::span<const ItemIndex> exclude) {
  const std::size_t n = table.num_items();
  const std::size_t d = table.dim();
  if (k < 1 || k > n) {
    throw ContractError("retrieve_topk: K=" + std::to_string(k) + " outside [1, " +
                        std::to_string(n) + "]");
  }
  if (oracle.size() != d) throw ContractError("retrieve_topk: oracle has wrong dimension");

  std::vector<std::uint8_t> skip;
  if (!exclude.empty()) {
    skip.assign(n + 1, 0);
    for (ItemIndex e : exclude) {
      if (e != kPaddingItem && e <= n) skip[e] = 1;
    }
  }

  std::vector<double> scores(n + 1, 0.0);
  std::vector<ItemIndex> candidates;
  candidates.reserve(n);
  const Real* w = table.weights().value.data();
  for (std::size_t i = 1; i <= n; ++i) {
    if (!skip.empty() && skip[i]) continue;
    const Real* row = w + i * d;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(oracle[j]) * static_cast<double>(row[j]);
    scores[i] = s;
    candidates.push_back(static_cast<ItemIndex>(i));
  }

  const std::size_t take = std::min(k, candidates.size());
  auto better = [&](ItemIndex a, ItemIndex b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take),
                    candidates.end(), better);

  RankedList out;
  out.items.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take));
  out.scores.reserve(take);
  for (ItemIndex i : out.items) out.scores.push_back(scores[i]);
  return out;
}

int hr_at_k(const RankedList& ranked, ItemIndex target) {
  return ranked.rank_of(target).has_value() ? 1 : 0;
}

double ndcg_at_k(std::optional<std::size_t> rank, std::size_t k) {
  if (k < 1) throw ContractError("ndcg_at_k: K must be >= 1");
  if (!rank || *rank < 1 || *rank > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(*rank) + 1.0);
}

MetricsReport summarize(std::span<const ExampleScore> scores, std::size_t k, double w,
                        std::uint64_t seed) {
  MetricsReport r;
  r.w = w;
  r.k = k;
  r.seed = seed;
  r.num_examples = scores.size();
  if (scores.empty()) return r;
  double hits = 0.0, gain = 0.0;
  for (const auto& s : scores) {
    hits += s.hit;
    gain += s.ndcg;
  }
  r.hr = hits / static_cast<double>(scores.size());
  r.ndcg = gain / static_cast<double>(scores.size());
  return r;
}

template <typename Real>
MetricsReport evaluate(const DreamRecModel<Real>& model, const Schedule& schedule,
                       std::span<const SequenceExample> examples, const EvalOptions& options,
                       std::vector<ExampleScore>* per_example) {
  if (examples.empty()) throw EmptyInputError("evaluate: split is empty");
  if (options.k < 1 || options.k > model.items().num_items()) {
    throw ContractError("evaluate: K=" + std::to_string(options.k) + " outside [1, " +
                        std::to_string(model.items().num_items()) + "]");
  }
  const std::size_t n = examples.size();
  const std::size_t window = model.config().window;
  const std::size_t chunk = std::max<std::size_t>(1, options.batch_size);
  const std::size_t num_chunks = (n + chunk - 1) / chunk;
  std::vector<ExampleScore> scores(n);

  auto run_chunk = [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    const auto slice = examples.subspan(begin, end - begin);
    std::vector<Rng> streams;
    streams.reserve(slice.size());
    for (std::size_t i = begin; i < end; ++i) {
      streams.push_back(Rng::stream(options.seed, StreamPurpose::kGenerate, 0, i));
    }
    for (const auto& ex : slice) {
      if (ex.history.size() != window) throw ContractError("evaluate: history window mismatch");
    }
    const std::vector<ItemIndex> histories = flatten_histories(slice);
    const Tensor<Real> oracles = generate_batch(model, schedule, histories, options.w, streams);
    const std::size_t d = model.config().dim;
    for (std::size_t r = 0; r < slice.size(); ++r) {
      std::span<const Real> oracle(oracles.data() + r * d, d);
      const RankedList ranked = retrieve_topk(
          oracle, model.items(), options.k,
          options.exclude_history ? std::span<const ItemIndex>(slice[r].history)
                                  : std::span<const ItemIndex>());
      const auto rank = ranked.rank_of(slice[r].target);
      scores[begin + r] = {rank ? 1 : 0, ndcg_at_k(rank, options.k)};
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, num_chunks);
  if (workers == 1) {
    for (std::size_t c = 0; c < num_chunks; ++c) run_chunk(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&] {
        for (std::size_t c = next++; c < num_chunks; c = next++) {
          try {
            run_chunk(c);
          } catch (...) {
            std::lock_guard<std::mutex> lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }

  if (per_example) *per_example = scores;
  return summarize(scores, options.k, options.w, options.seed);
}

template <typename Real>
std::vector<MetricsReport> ablate_w(const DreamRecModel<Real>& model, const Schedule& schedule,
                                    std::span<const SequenceExample> examples,
                                    std::span<const double> w_list, const EvalOptions& options) {
  if (w_list.empty()) throw ContractError("ablate_w: empty guidance list");
  std::vector<MetricsReport> out;
  for (double w : w_list) {
    EvalOptions o = options;
    o.w = w;
    out.push_back(evaluate(model, schedule, examples, o));
  }
  return out;
}

std::string metrics_csv(std::span<const MetricsReport> reports) {
  std::string out = "w,K,hr,ndcg,num_examples,seed\n";
  char line[256];
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%g,%zu,%.8f,%.8f,%zu,%llu\n", r.w, r.k, r.hr, r.ndcg,
                  r.num_examples, static_cast<unsigned long long>(r.seed));
    out += line;
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsReport> reports) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << metrics_csv(reports);
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

template <typename Real>
void export_embeddings(const ItemEmbeddingTable<Real>& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const std::size_t d = table.dim();
  out << "item";
  for (std::size_t j = 0; j < d; ++j) out << ",e" << j;
  out << '\n';
  char buf[64];
  for (std::size_t i = 1; i <= table.num_items(); ++i) {
    out << i;
    for (Real v : table.row(static_cast<ItemIndex>(i))) {
      std::snprintf(buf, sizeof buf, ",%.*g", std::numeric_limits<Real>::max_digits10,
                    static_cast<double>(v));
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

#define DREAMREC_INSTANTIATE(Real)                                                                \
  template RankedList retrieve_topk(std::span<const Real>, const ItemEmbeddingTable<Real>&,       \
                                    std::size_t, std::span<const ItemIndex>);                     \
  template MetricsReport evaluate(const DreamRecModel<Real>&, const Schedule&,                    \
                                  std::span<const SequenceExample>, const EvalOptions&,           \
                                  std::vector<ExampleScore>*);                                    \
  template std::vector<MetricsReport> ablate_w(const DreamRecModel<Real>&, const Schedule&,       \
                                               std::span<const SequenceExample>,                  \
                                               std::span<const double>, const EvalOptions&);      \
  template void export_embeddings(const ItemEmbeddingTable<Real>&, const std::filesystem::path&);

DREAMREC_INSTANTIATE(float)
DREAMREC_INSTANTIATE(double)

}  // namespace dreamrec
