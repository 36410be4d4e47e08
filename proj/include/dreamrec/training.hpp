#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dreamrec/checkpoint.hpp"
#include "dreamrec/data.hpp"
#include "dreamrec/diffusion.hpp"
#include "dreamrec/evaluation.hpp"
#include "dreamrec/model.hpp"
#include "dreamrec/optim.hpp"
#include "dreamrec/schedule.hpp"

namespace dreamrec {

struct TrainConfig {
  /// Required; there is no entropy fallback.
  std::optional<std::uint64_t> seed;
  std::size_t epochs = 500;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  /// num_items is taken from the dataset.
  ModelConfig model;
  ScheduleConfig schedule;
  DiffusionConfig diffusion;
  /// Validation cut-off for model selection.
  std::size_t eval_k = 20;
  /// Seed of the validation sampler; defaults to `seed`.
  std::optional<std::uint64_t> eval_seed;
  std::size_t eval_workers = 1;
  std::size_t eval_batch_size = 256;
  /// Where best.ckpt and last.ckpt go; empty disables checkpoint files.
  std::filesystem::path checkpoint_dir;

  void validate() const;
  std::uint64_t require_seed() const;
  std::uint64_t validation_seed() const { return eval_seed.value_or(require_seed()); }
};

struct EpochRecord {
  std::size_t epoch = 0;  ///< 1-based
  double loss = 0.0;      ///< mean per-example training loss
  double hr = 0.0;        ///< validation HR@K
  double ndcg = 0.0;      ///< validation NDCG@K
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_hr = -1.0;
  std::size_t k = 20;
  double wall_seconds = 0.0;

  /// `epoch,loss,hr,ndcg`; free of timing so reruns compare byte for byte.
  std::string csv() const;
  /// `epoch,seconds`.
  std::string timing_csv() const;
  std::string summary() const;
};

struct TrainResult {
  /// Parameters of the best validation epoch.
  std::unique_ptr<Model> model;
  TrainReport report;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Stop after this many epochs in the current call (for resume tests).
  std::optional<std::size_t> stop_after;
};

/// Runs the epochs in `config`. With `resume_from` (a last.ckpt), training
/// continues from the stored epoch with the stored weights, optimizer state
/// and history.
TrainResult train(const SequenceDataset& dataset, const TrainConfig& config,
                  const std::optional<std::filesystem::path>& resume_from = std::nullopt,
                  const TrainHooks& hooks = {});

// ---------------------------------------------------------------------------
// Checkpoints

/// Model hyperparameters as checkpoint metadata, and back.
std::vector<std::pair<std::string, std::string>> model_metadata(const ModelConfig& model);
ModelConfig read_model_config(const num::Container& container);

/// Hash of everything that determines parameter shapes and sampling.
std::uint64_t config_fingerprint(const ModelConfig& model, const ScheduleConfig& schedule,
                                 const DiffusionConfig& diffusion);

struct CheckpointContents {
  ModelConfig model_config;
  ScheduleConfig schedule;
  DiffusionConfig diffusion;
  std::unique_ptr<Model> model;
  std::optional<num::AdamWState<float>> optimizer;
  std::uint64_t fingerprint = 0;
  num::Container container;
};

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const num::AdamWState<float>* optimizer, const ScheduleConfig& schedule,
                     const DiffusionConfig& diffusion,
                     const std::vector<std::pair<std::string, std::string>>& extra = {});

/// Rebuilds the model described by the file.
CheckpointContents load_checkpoint(const std::filesystem::path& path);

/// Loads weights into an existing model. Shape disagreements raise
/// FormatError; a fingerprint that differs from the model's configuration is
/// only reported through `warning`.
void restore_checkpoint(const num::Container& container, Model& model,
                        num::AdamWState<float>* optimizer, const ScheduleConfig& schedule,
                        const DiffusionConfig& diffusion,
                        const std::function<void(const std::string&)>& warning = {});

}  // namespace dreamrec
