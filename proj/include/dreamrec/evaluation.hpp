#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dreamrec/data.hpp"
#include "dreamrec/diffusion.hpp"
#include "dreamrec/model.hpp"
#include "dreamrec/schedule.hpp"

namespace dreamrec {

/// Top-K items by inner product with an oracle, best first. Ties go to the
/// smaller item index; the padding row is never a candidate.
struct RankedList {
  std::vector<ItemIndex> items;
  std::vector<double> scores;

  std::size_t size() const noexcept { return items.size(); }
  /// 1-based rank of `item`, or nullopt when it is not in the list.
  std::optional<std::size_t> rank_of(ItemIndex item) const;
};

/// K must lie in [1, num_items]. Items listed in `exclude` are skipped, so
/// the list can come back shorter than K when exclusion is used.
template <typename Real>
RankedList retrieve_topk(std::span<const Real> oracle, const ItemEmbeddingTable<Real>& table,
                         std::size_t k, std::span<const ItemIndex> exclude = {});

int hr_at_k(const RankedList& ranked, ItemIndex target);
double ndcg_at_k(std::optional<std::size_t> rank, std::size_t k);

struct MetricsReport {
  double w = 0.0;
  std::size_t k = 20;
  double hr = 0.0;
  double ndcg = 0.0;
  std::size_t num_examples = 0;
  std::uint64_t seed = 0;
};

struct EvalOptions {
  std::size_t k = 20;
  double w = 2.0;
  std::uint64_t seed = 0;
  /// Threads used for generation; results do not depend on it.
  std::size_t workers = 1;
  /// Examples generated together in one batched sampler call.
  std::size_t batch_size = 256;
  bool exclude_history = false;
};

/// Per-example outcome, in split order.
struct ExampleScore {
  int hit = 0;
  double ndcg = 0.0;
};

/// Generates one oracle per example from stream (seed, generate, 0, index),
/// retrieves the top K and averages HR / NDCG.
template <typename Real>
MetricsReport evaluate(const DreamRecModel<Real>& model, const Schedule& schedule,
                       std::span<const SequenceExample> examples, const EvalOptions& options,
                       std::vector<ExampleScore>* per_example = nullptr);

/// One evaluate() per guidance strength, all sharing the same seed.
template <typename Real>
std::vector<MetricsReport> ablate_w(const DreamRecModel<Real>& model, const Schedule& schedule,
                                    std::span<const SequenceExample> examples,
                                    std::span<const double> w_list, const EvalOptions& options);

/// Shared averaging step: mean hit and NDCG over scores.
MetricsReport summarize(std::span<const ExampleScore> scores, std::size_t k, double w,
                        std::uint64_t seed);

/// `w,K,hr,ndcg,num_examples,seed` header plus one row per report.
std::string metrics_csv(std::span<const MetricsReport> reports);
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsReport> reports);

/// `item,e0,...` header then one row per real item (padding excluded).
template <typename Real>
void export_embeddings(const ItemEmbeddingTable<Real>& table, const std::filesystem::path& path);

}  // namespace dreamrec
