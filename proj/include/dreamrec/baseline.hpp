#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "dreamrec/data.hpp"
#include "dreamrec/evaluation.hpp"
#include "dreamrec/model.hpp"
#include "dreamrec/rng.hpp"
#include "dreamrec/training.hpp"

namespace dreamrec {

/// Next-item classifier: score(history, item) = <encoder(history), e_item>.
class ClassifierModel {
 public:
  ClassifierModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  num::ParameterSet<float>& parameters() noexcept { return params_; }
  const num::ParameterSet<float>& parameters() const noexcept { return params_; }
  const ItemEmbeddingTable<float>& items() const noexcept { return items_; }
  const GuidanceEncoder<float>& encoder() const noexcept { return encoder_; }

  /// Encoded histories [batch, dim].
  num::Var encode(num::Graph<float>& g, std::span<const ItemIndex> histories) const;

 private:
  ModelConfig config_;
  num::ParameterSet<float> params_;
  ItemEmbeddingTable<float> items_;
  GuidanceEncoder<float> encoder_;
};

/// One uniform non-target item per target, by rejection.
std::vector<ItemIndex> sample_negatives(std::span<const ItemIndex> targets, std::size_t num_items,
                                        std::span<Rng> streams);

/// -log sigmoid(s+) - log(1 - sigmoid(s-)) per example, or only the first
/// term when `negatives` is empty; mean over the batch.
num::Var bce_loss(num::Graph<float>& g, const ClassifierModel& model,
                  std::span<const ItemIndex> histories, std::span<const ItemIndex> targets,
                  std::span<const ItemIndex> negatives);

/// Ranks all real items by score with the same top-K routine as DreamRec.
MetricsReport evaluate_classifier(const ClassifierModel& model,
                                  std::span<const SequenceExample> examples, std::size_t k,
                                  bool exclude_history = false);

struct BaselineConfig {
  std::optional<std::uint64_t> seed;
  std::size_t epochs = 500;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  /// L2 strength, applied as decoupled weight decay.
  double l2 = 0.0;
  bool use_negatives = true;
  ModelConfig model;
  std::size_t eval_k = 20;

  void validate() const;
};

struct BaselineResult {
  std::unique_ptr<ClassifierModel> model;
  /// Validation curve; the best epoch is chosen by HR@K as for DreamRec.
  TrainReport report;
};

BaselineResult train_classifier(const SequenceDataset& dataset, const BaselineConfig& config,
                                const std::function<void(const EpochRecord&)>& on_epoch = {});

void save_classifier(const std::filesystem::path& path, const ClassifierModel& model);
std::unique_ptr<ClassifierModel> load_classifier(const std::filesystem::path& path);

}  // namespace dreamrec
