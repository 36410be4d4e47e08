#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dreamrec/data.hpp"
#include "dreamrec/diffusion.hpp"
#include "dreamrec/model.hpp"
#include "dreamrec/schedule.hpp"

namespace dreamrec::cli {

enum ExitCode : int {
  kOk = 0,
  kUsageError = 1,
  kDataError = 2,
  kNumericAbort = 3,
};

/// Everything a run needs. All fields default except `seed` and, for
/// file-backed data, `data.input`.
struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::filesystem::path output_dir = "run";

  struct Data {
    /// "file" reads data.input; "synthetic" generates from `synthetic`.
    std::string source = "file";
    std::optional<std::filesystem::path> input;
    /// Dataset cache; defaults to <output_dir>/dataset.json.
    std::optional<std::filesystem::path> cache;
    SequenceFilters filters;
  } data;

  struct Synthetic {
    std::size_t num_items = 100;
    std::size_t num_sequences = 500;
    std::size_t sequence_length = 11;
    double noise = 0.1;
  } synthetic;

  ModelConfig model;
  ScheduleConfig schedule;
  DiffusionConfig diffusion;

  struct Train {
    std::size_t epochs = 500;
    std::size_t batch_size = 256;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
  } train;

  struct Eval {
    std::size_t k = 20;
    /// Guidance strength for `eval`; diffusion.guidance when unset.
    std::optional<double> w;
    std::vector<double> w_grid = {0, 2, 4, 6, 8, 10};
    std::string split = "test";
    std::optional<std::uint64_t> seed;
    std::size_t workers = 1;
    std::size_t batch_size = 256;
    bool exclude_history = false;
  } eval;

  struct Baseline {
    std::size_t epochs = 500;
    std::size_t batch_size = 256;
    double learning_rate = 1e-3;
    double l2 = 0.0;
    bool use_negatives = true;
  } baseline;

  std::filesystem::path cache_path() const {
    return data.cache.value_or(output_dir / "dataset.json");
  }
  std::uint64_t eval_seed() const;
};

/// Strict parse: unknown keys and wrong types raise ConfigError naming the
/// dotted key path (e.g. "train.lerning_rate").
RunConfig parse_run_config(const std::string& text, const std::string& source = "config");
RunConfig load_run_config(const std::filesystem::path& path);
/// Fully resolved document; parse_run_config(dump_run_config(c)) == c.
std::string dump_run_config(const RunConfig& config);

/// Runs one command line (args excludes the program name). Returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dreamrec::cli
