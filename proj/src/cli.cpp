#include "dreamrec/cli.hpp"

#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dreamrec/baseline.hpp"
#include "dreamrec/errors.hpp"
#include "dreamrec/evaluation.hpp"
#include "dreamrec/training.hpp"

namespace dreamrec::cli {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config document

namespace {

std::string join_key(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

void convert(const json& v, std::size_t& out, const std::string& key) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError(key + ": expected a non-negative integer");
  }
  out = v.get<std::size_t>();
}

void convert(const json& v, int& out, const std::string& key) {
  if (!v.is_number_integer()) throw ConfigError(key + ": expected an integer");
  out = v.get<int>();
}

void convert(const json& v, double& out, const std::string& key) {
  if (!v.is_number()) throw ConfigError(key + ": expected a number");
  out = v.get<double>();
}

void convert(const json& v, bool& out, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError(key + ": expected true or false");
  out = v.get<bool>();
}

void convert(const json& v, std::string& out, const std::string& key) {
  if (!v.is_string()) throw ConfigError(key + ": expected a string");
  out = v.get<std::string>();
}

void convert(const json& v, fs::path& out, const std::string& key) {
  if (!v.is_string()) throw ConfigError(key + ": expected a path string");
  out = v.get<std::string>();
}

void convert(const json& v, std::vector<double>& out, const std::string& key) {
  if (!v.is_array()) throw ConfigError(key + ": expected a list of numbers");
  out.clear();
  for (std::size_t i = 0; i < v.size(); ++i) {
    double x = 0;
    convert(v[i], x, key + "[" + std::to_string(i) + "]");
    out.push_back(x);
  }
}

template <typename T>
void convert(const json& v, std::optional<T>& out, const std::string& key) {
  if (v.is_null()) {
    out.reset();
    return;
  }
  T value{};
  convert(v, value, key);
  out = std::move(value);
}

/// One JSON object being read; remembers which keys were consumed.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) {
      throw ConfigError((path_.empty() ? std::string("config") : path_) + ": expected an object");
    }
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (const auto it = node_.find(key); it != node_.end()) convert(*it, out, join_key(path_, key));
  }

  template <typename Fn>
  void section(const std::string& key, Fn&& fn) {
    seen_.insert(key);
    if (const auto it = node_.find(key); it != node_.end()) {
      Section child(*it, join_key(path_, key));
      fn(child);
      child.finish();
    }
  }

  void finish() const {
    for (const auto& item : node_.items()) {
      if (!seen_.count(item.key())) {
        throw ConfigError("unknown config key '" + join_key(path_, item.key()) + "'");
      }
    }
  }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

LossWeighting weighting_from(const std::string& s) {
  if (s == "simple") return LossWeighting::kSimple;
  if (s == "variational") return LossWeighting::kVariational;
  throw ConfigError("diffusion.weighting: expected \"simple\" or \"variational\", got \"" + s + "\"");
}

template <typename T>
ordered_json optional_json(const std::optional<T>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

}  // namespace

std::uint64_t RunConfig::eval_seed() const {
  if (eval.seed) return *eval.seed;
  if (!seed) throw ConfigError("seed is required");
  return *seed;
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ": not valid JSON (" + e.what() + ")");
  }
  RunConfig c;
  Section root(doc, "");
  root.read("seed", c.seed);
  root.read("output_dir", c.output_dir);
  root.section("data", [&](Section& s) {
    s.read("source", c.data.source);
    s.read("input", c.data.input);
    s.read("cache", c.data.cache);
    s.read("min_item_count", c.data.filters.min_item_count);
    s.read("min_seq_len", c.data.filters.min_seq_len);
    s.read("window", c.data.filters.window);
  });
  root.section("synthetic", [&](Section& s) {
    s.read("num_items", c.synthetic.num_items);
    s.read("num_sequences", c.synthetic.num_sequences);
    s.read("sequence_length", c.synthetic.sequence_length);
    s.read("noise", c.synthetic.noise);
  });
  root.section("model", [&](Section& s) {
    s.read("dim", c.model.dim);
    s.read("heads", c.model.heads);
    s.read("layers", c.model.layers);
    s.read("ffn_mult", c.model.ffn_mult);
    s.read("hidden_mult", c.model.hidden_mult);
    s.read("embedding_init_std", c.model.embedding_init_std);
  });
  root.section("diffusion", [&](Section& s) {
    s.read("steps", c.schedule.steps);
    s.read("beta_start", c.schedule.beta_start);
    s.read("beta_end", c.schedule.beta_end);
    s.read("p_uncond", c.diffusion.p_uncond);
    s.read("guidance", c.diffusion.guidance);
    std::string weighting = c.diffusion.weighting == LossWeighting::kSimple ? "simple" : "variational";
    s.read("weighting", weighting);
    c.diffusion.weighting = weighting_from(weighting);
  });
  root.section("train", [&](Section& s) {
    s.read("epochs", c.train.epochs);
    s.read("batch_size", c.train.batch_size);
    s.read("learning_rate", c.train.learning_rate);
    s.read("weight_decay", c.train.weight_decay);
  });
  root.section("eval", [&](Section& s) {
    s.read("k", c.eval.k);
    s.read("w", c.eval.w);
    s.read("w_grid", c.eval.w_grid);
    s.read("split", c.eval.split);
    s.read("seed", c.eval.seed);
    s.read("workers", c.eval.workers);
    s.read("batch_size", c.eval.batch_size);
    s.read("exclude_history", c.eval.exclude_history);
  });
  root.section("baseline", [&](Section& s) {
    s.read("epochs", c.baseline.epochs);
    s.read("batch_size", c.baseline.batch_size);
    s.read("learning_rate", c.baseline.learning_rate);
    s.read("l2", c.baseline.l2);
    s.read("use_negatives", c.baseline.use_negatives);
  });
  root.finish();
  if (c.data.source != "file" && c.data.source != "synthetic") {
    throw ConfigError("data.source: expected \"file\" or \"synthetic\", got \"" + c.data.source + "\"");
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_run_config(buffer.str(), path.string());
}

std::string dump_run_config(const RunConfig& c) {
  ordered_json doc;
  doc["seed"] = optional_json(c.seed);
  doc["output_dir"] = c.output_dir.string();
  doc["data"] = {
      {"source", c.data.source},
      {"input", c.data.input ? ordered_json(c.data.input->string()) : ordered_json(nullptr)},
      {"cache", c.data.cache ? ordered_json(c.data.cache->string()) : ordered_json(nullptr)},
      {"min_item_count", c.data.filters.min_item_count},
      {"min_seq_len", c.data.filters.min_seq_len},
      {"window", c.data.filters.window},
  };
  doc["synthetic"] = {
      {"num_items", c.synthetic.num_items},
      {"num_sequences", c.synthetic.num_sequences},
      {"sequence_length", c.synthetic.sequence_length},
      {"noise", c.synthetic.noise},
  };
  doc["model"] = {
      {"dim", c.model.dim},
      {"heads", c.model.heads},
      {"layers", c.model.layers},
      {"ffn_mult", c.model.ffn_mult},
      {"hidden_mult", c.model.hidden_mult},
      {"embedding_init_std", c.model.embedding_init_std},
  };
  doc["diffusion"] = {
      {"steps", c.schedule.steps},
      {"beta_start", c.schedule.beta_start},
      {"beta_end", c.schedule.beta_end},
      {"p_uncond", c.diffusion.p_uncond},
      {"guidance", c.diffusion.guidance},
      {"weighting", c.diffusion.weighting == LossWeighting::kSimple ? "simple" : "variational"},
  };
  doc["train"] = {
      {"epochs", c.train.epochs},
      {"batch_size", c.train.batch_size},
      {"learning_rate", c.train.learning_rate},
      {"weight_decay", c.train.weight_decay},
  };
  doc["eval"] = {
      {"k", c.eval.k},
      {"w", optional_json(c.eval.w)},
      {"w_grid", c.eval.w_grid},
      {"split", c.eval.split},
      {"seed", optional_json(c.eval.seed)},
      {"workers", c.eval.workers},
      {"batch_size", c.eval.batch_size},
      {"exclude_history", c.eval.exclude_history},
  };
  doc["baseline"] = {
      {"epochs", c.baseline.epochs},
      {"batch_size", c.baseline.batch_size},
      {"learning_rate", c.baseline.learning_rate},
      {"l2", c.baseline.l2},
      {"use_negatives", c.baseline.use_negatives},
  };
  return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Commands

namespace {

std::uint64_t require_seed(const RunConfig& c) {
  if (!c.seed) throw ConfigError("seed is required (set \"seed\" in the config or pass --seed)");
  return *c.seed;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void write_snapshot(const RunConfig& c, const std::string& command) {
  write_text(c.output_dir / (command + "_config.json"), dump_run_config(c));
}

ModelConfig model_for(const RunConfig& c, const SequenceDataset& ds) {
  ModelConfig m = c.model;
  m.num_items = ds.num_items();
  m.window = ds.window;
  return m;
}

TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.seed = require_seed(c);
  t.epochs = c.train.epochs;
  t.batch_size = c.train.batch_size;
  t.learning_rate = c.train.learning_rate;
  t.weight_decay = c.train.weight_decay;
  t.model = c.model;
  t.schedule = c.schedule;
  t.diffusion = c.diffusion;
  t.eval_k = c.eval.k;
  t.eval_seed = c.eval.seed;
  t.eval_workers = c.eval.workers;
  t.eval_batch_size = c.eval.batch_size;
  t.checkpoint_dir = c.output_dir / "checkpoints";
  return t;
}

std::string metrics_table(std::span<const MetricsReport> reports) {
  std::ostringstream os;
  os << std::left << std::setw(8) << "w" << std::setw(6) << "K" << std::setw(12) << "HR"
     << std::setw(12) << "NDCG" << "examples\n";
  for (const auto& r : reports) {
    char hr[32], ndcg[32];
    std::snprintf(hr, sizeof hr, "%.4f", r.hr);
    std::snprintf(ndcg, sizeof ndcg, "%.4f", r.ndcg);
    os << std::left << std::setw(8) << r.w << std::setw(6) << r.k << std::setw(12) << hr
       << std::setw(12) << ndcg << r.num_examples << "\n";
  }
  return os.str();
}

void cmd_prepare(RunConfig& c, const std::optional<fs::path>& log_out, std::ostream& out,
                 std::ostream& err) {
  InteractionLog log;
  if (c.data.source == "synthetic") {
    SyntheticSpec spec;
    spec.num_items = c.synthetic.num_items;
    spec.num_sequences = c.synthetic.num_sequences;
    spec.sequence_length = c.synthetic.sequence_length;
    spec.noise = c.synthetic.noise;
    spec.seed = require_seed(c);
    try {
      spec.validate();
    } catch (const ContractError& e) {
      throw ConfigError(std::string("synthetic: ") + e.what());
    }
    log = synth_log(spec);
  } else {
    if (!c.data.input) throw ConfigError("data.input is required (pass --input)");
    log = ingest_interactions(*c.data.input);
    for (std::size_t i = 0; i < log.malformed_lines.size(); ++i) {
      if (i == 10) {
        err << "warning: " << log.malformed_lines.size() - 10 << " more malformed lines skipped\n";
        break;
      }
      err << "warning: " << c.data.input->string() << ":" << log.malformed_lines[i]
          << ": malformed record skipped\n";
    }
  }
  if (log_out) write_interactions(*log_out, log);

  const SequenceDataset ds = split_chronological(build_sequences(log, c.data.filters));
  const fs::path cache = c.cache_path();
  if (cache.has_parent_path()) fs::create_directories(cache.parent_path());
  save_dataset(cache, ds);
  c.data.cache = cache;
  write_snapshot(c, "prepare");
  out << "items       " << ds.num_items() << "\n"
      << "train       " << ds.train.size() << "\n"
      << "validation  " << ds.validation.size() << "\n"
      << "test        " << ds.test.size() << "\n"
      << "wrote " << cache.string() << "\n";
}

void cmd_train(RunConfig& c, bool resume, std::ostream& out) {
  const SequenceDataset ds = load_dataset(c.cache_path());
  const TrainConfig t = train_config(c);
  std::optional<fs::path> resume_from;
  if (resume) resume_from = t.checkpoint_dir / "last.ckpt";
  c.data.cache = c.cache_path();
  write_snapshot(c, "train");

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %4zu  loss %.6f  val HR@%zu %.4f  NDCG@%zu %.4f  (%.1fs)\n",
                  r.epoch, r.loss, t.eval_k, r.hr, t.eval_k, r.ndcg, r.seconds);
    out << line << std::flush;
  };
  const TrainResult result = train(ds, t, resume_from, hooks);
  write_text(c.output_dir / "train_report.csv", result.report.csv());
  write_text(c.output_dir / "train_timing.csv", result.report.timing_csv());
  write_text(c.output_dir / "train_summary.txt", result.report.summary());
  out << result.report.summary();
}

void cmd_eval(RunConfig& c, const std::string& command, const std::optional<fs::path>& checkpoint,
              const std::optional<fs::path>& out_path, bool grid, std::ostream& out,
              std::ostream& err) {
  const SequenceDataset ds = load_dataset(c.cache_path());
  const fs::path ckpt = checkpoint.value_or(c.output_dir / "checkpoints" / "best.ckpt");
  Model model(model_for(c, ds), 0);
  restore_checkpoint(num::read_container(ckpt), model, nullptr, c.schedule, c.diffusion,
                     [&](const std::string& msg) { err << "warning: " << ckpt.string() << ": " << msg << "\n"; });
  const Schedule schedule = c.schedule.build();

  EvalOptions o;
  o.k = c.eval.k;
  o.seed = c.eval_seed();
  o.workers = c.eval.workers;
  o.batch_size = c.eval.batch_size;
  o.exclude_history = c.eval.exclude_history;
  c.data.cache = c.cache_path();
  c.eval.seed = o.seed;

  const auto& split = ds.split(c.eval.split);
  std::vector<MetricsReport> reports;
  if (grid) {
    reports = ablate_w(model, schedule, split, c.eval.w_grid, o);
  } else {
    c.eval.w = c.eval.w.value_or(c.diffusion.guidance);
    o.w = *c.eval.w;
    reports.push_back(evaluate(model, schedule, split, o));
  }
  write_snapshot(c, command);
  const fs::path csv = out_path.value_or(
      c.output_dir / ((grid ? "ablation_" : "eval_") + c.eval.split + ".csv"));
  write_text(csv, metrics_csv(reports));
  out << metrics_table(reports) << "wrote " << csv.string() << "\n";
}

void cmd_baseline(RunConfig& c, const std::optional<fs::path>& out_path, std::ostream& out) {
  const SequenceDataset ds = load_dataset(c.cache_path());
  BaselineConfig b;
  b.seed = require_seed(c);
  b.epochs = c.baseline.epochs;
  b.batch_size = c.baseline.batch_size;
  b.learning_rate = c.baseline.learning_rate;
  b.l2 = c.baseline.l2;
  b.use_negatives = c.baseline.use_negatives;
  b.model = c.model;
  b.eval_k = c.eval.k;
  const std::string tag = b.use_negatives ? "baseline_neg" : "baseline_noneg";
  c.data.cache = c.cache_path();
  write_snapshot(c, tag);

  const auto on_epoch = [&](const EpochRecord& r) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %4zu  loss %.6f  val HR@%zu %.4f  NDCG@%zu %.4f\n",
                  r.epoch, r.loss, b.eval_k, r.hr, b.eval_k, r.ndcg);
    out << line << std::flush;
  };
  const BaselineResult result = train_classifier(ds, b, on_epoch);
  save_classifier(c.output_dir / (tag + ".ckpt"), *result.model);
  write_text(c.output_dir / (tag + "_report.csv"), result.report.csv());

  MetricsReport m = evaluate_classifier(*result.model, ds.split(c.eval.split), c.eval.k,
                                        c.eval.exclude_history);
  m.seed = *b.seed;
  const MetricsReport rows[] = {m};
  const fs::path csv = out_path.value_or(c.output_dir / (tag + "_" + c.eval.split + ".csv"));
  write_text(csv, metrics_csv(rows));
  out << metrics_table(rows) << "wrote " << csv.string() << "\n";
}

void cmd_export(RunConfig& c, const std::optional<fs::path>& checkpoint,
                const std::optional<fs::path>& out_path, std::ostream& out) {
  const fs::path ckpt = checkpoint.value_or(c.output_dir / "checkpoints" / "best.ckpt");
  const fs::path csv = out_path.value_or(c.output_dir / "embeddings.csv");
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  const num::Container container = num::read_container(ckpt);
  const std::string* format = container.meta("format");
  if (format && *format == "dreamrec-classifier") {
    export_embeddings(load_classifier(ckpt)->items(), csv);
  } else {
    export_embeddings(load_checkpoint(ckpt).model->items(), csv);
  }
  write_snapshot(c, "export");
  out << "wrote " << csv.string() << "\n";
}

/// A command-line value that, when given, overrides one config field.
using Override = std::function<void(RunConfig&)>;

template <typename T, typename Set>
CLI::Option* override_option(CLI::App* app, std::vector<Override>& overrides,
                             const std::string& name, const std::string& help, Set set) {
  auto value = std::make_shared<T>();
  CLI::Option* opt = app->add_option(name, *value, help);
  overrides.push_back([value, opt, set](RunConfig& c) {
    if (opt->count() > 0) set(c, *value);
  });
  return opt;
}

struct Command {
  explicit Command(CLI::App* sub) : app(sub) {}
  CLI::App* app;
  std::vector<Override> overrides;
  std::string config_path;
};

void add_common(Command& cmd) {
  cmd.app->add_option("-c,--config", cmd.config_path, "JSON run configuration");
  override_option<std::uint64_t>(cmd.app, cmd.overrides, "--seed", "Seed for all randomness",
                                 [](RunConfig& c, std::uint64_t v) { c.seed = v; });
  override_option<std::string>(cmd.app, cmd.overrides, "-o,--output-dir", "Output directory",
                               [](RunConfig& c, const std::string& v) { c.output_dir = v; });
  override_option<std::string>(cmd.app, cmd.overrides, "--dataset", "Dataset cache path",
                               [](RunConfig& c, const std::string& v) { c.data.cache = v; });
}

void add_model_flags(Command& cmd) {
  override_option<std::size_t>(cmd.app, cmd.overrides, "--dim", "Embedding dimension",
                               [](RunConfig& c, std::size_t v) { c.model.dim = v; });
  override_option<int>(cmd.app, cmd.overrides, "--steps", "Diffusion steps T",
                       [](RunConfig& c, int v) { c.schedule.steps = v; });
  override_option<double>(cmd.app, cmd.overrides, "--p-uncond", "Guidance dropout probability",
                          [](RunConfig& c, double v) { c.diffusion.p_uncond = v; });
  override_option<double>(cmd.app, cmd.overrides, "--guidance", "Guidance strength w",
                          [](RunConfig& c, double v) { c.diffusion.guidance = v; });
}

void add_eval_flags(Command& cmd) {
  override_option<std::size_t>(cmd.app, cmd.overrides, "-k,--k", "Top-K cut-off",
                               [](RunConfig& c, std::size_t v) { c.eval.k = v; });
  override_option<std::string>(cmd.app, cmd.overrides, "--split", "train, validation or test",
                               [](RunConfig& c, const std::string& v) { c.eval.split = v; });
  override_option<std::uint64_t>(cmd.app, cmd.overrides, "--eval-seed", "Sampler seed",
                                 [](RunConfig& c, std::uint64_t v) { c.eval.seed = v; });
  override_option<std::size_t>(cmd.app, cmd.overrides, "--workers", "Evaluation threads",
                               [](RunConfig& c, std::size_t v) { c.eval.workers = v; });
}

int fail(std::ostream& err, int code, const std::string& what) {
  err << "error: " << what << "\n";
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DreamRec: next-item recommendation by guided diffusion", "dreamrec"};
  app.require_subcommand(1);

  Command prepare{app.add_subcommand("prepare", "Build the dataset cache from a log")};
  add_common(prepare);
  override_option<std::string>(prepare.app, prepare.overrides, "-i,--input", "Interaction log (TSV)",
                               [](RunConfig& c, const std::string& v) { c.data.input = v; });
  override_option<std::string>(prepare.app, prepare.overrides, "--out", "Dataset cache to write",
                               [](RunConfig& c, const std::string& v) { c.data.cache = v; });
  override_option<std::size_t>(prepare.app, prepare.overrides, "--min-item-count", "Item filter",
                               [](RunConfig& c, std::size_t v) { c.data.filters.min_item_count = v; });
  override_option<std::size_t>(prepare.app, prepare.overrides, "--min-seq-len", "Sequence filter",
                               [](RunConfig& c, std::size_t v) { c.data.filters.min_seq_len = v; });
  override_option<std::size_t>(prepare.app, prepare.overrides, "--window", "History window",
                               [](RunConfig& c, std::size_t v) { c.data.filters.window = v; });
  bool synthetic = false;
  prepare.app->add_flag("--synthetic", synthetic, "Generate a synthetic log instead of reading one");
  override_option<std::size_t>(prepare.app, prepare.overrides, "--num-items", "Synthetic items",
                               [](RunConfig& c, std::size_t v) { c.synthetic.num_items = v; });
  override_option<std::size_t>(prepare.app, prepare.overrides, "--num-sequences", "Synthetic users",
                               [](RunConfig& c, std::size_t v) { c.synthetic.num_sequences = v; });
  override_option<std::size_t>(prepare.app, prepare.overrides, "--sequence-length",
                               "Interactions per synthetic user",
                               [](RunConfig& c, std::size_t v) { c.synthetic.sequence_length = v; });
  override_option<double>(prepare.app, prepare.overrides, "--noise", "Synthetic noise level",
                          [](RunConfig& c, double v) { c.synthetic.noise = v; });
  std::string log_out;
  prepare.app->add_option("--log-out", log_out, "Also write the raw (synthetic) log here");

  Command train_cmd{app.add_subcommand("train", "Train DreamRec")};
  add_common(train_cmd);
  add_model_flags(train_cmd);
  override_option<std::size_t>(train_cmd.app, train_cmd.overrides, "--epochs", "Epochs",
                               [](RunConfig& c, std::size_t v) { c.train.epochs = v; });
  override_option<std::size_t>(train_cmd.app, train_cmd.overrides, "--batch-size", "Batch size",
                               [](RunConfig& c, std::size_t v) { c.train.batch_size = v; });
  override_option<double>(train_cmd.app, train_cmd.overrides, "--lr", "Learning rate",
                          [](RunConfig& c, double v) { c.train.learning_rate = v; });
  override_option<double>(train_cmd.app, train_cmd.overrides, "--weight-decay", "AdamW weight decay",
                          [](RunConfig& c, double v) { c.train.weight_decay = v; });
  override_option<std::size_t>(train_cmd.app, train_cmd.overrides, "-k,--k", "Validation cut-off",
                               [](RunConfig& c, std::size_t v) { c.eval.k = v; });
  override_option<std::size_t>(train_cmd.app, train_cmd.overrides, "--workers", "Validation threads",
                               [](RunConfig& c, std::size_t v) { c.eval.workers = v; });
  bool resume = false;
  train_cmd.app->add_flag("--resume", resume, "Continue from <output-dir>/checkpoints/last.ckpt");

  std::string checkpoint, out_file;
  Command eval_cmd{app.add_subcommand("eval", "Evaluate a checkpoint")};
  add_common(eval_cmd);
  add_model_flags(eval_cmd);
  add_eval_flags(eval_cmd);
  eval_cmd.app->add_option("--checkpoint", checkpoint, "Checkpoint (default: best.ckpt)");
  eval_cmd.app->add_option("--out", out_file, "Metrics CSV to write");
  override_option<double>(eval_cmd.app, eval_cmd.overrides, "-w,--w", "Guidance strength",
                          [](RunConfig& c, double v) { c.eval.w = v; });
  auto* eval_grid = override_option<std::vector<double>>(
      eval_cmd.app, eval_cmd.overrides, "--w-grid", "Evaluate every listed guidance strength",
      [](RunConfig& c, const std::vector<double>& v) { c.eval.w_grid = v; });
  eval_grid->delimiter(',');

  Command ablate_cmd{app.add_subcommand("ablate", "Guidance-strength sweep")};
  add_common(ablate_cmd);
  add_model_flags(ablate_cmd);
  add_eval_flags(ablate_cmd);
  ablate_cmd.app->add_option("--checkpoint", checkpoint, "Checkpoint (default: best.ckpt)");
  ablate_cmd.app->add_option("--out", out_file, "Metrics CSV to write");
  override_option<std::vector<double>>(
      ablate_cmd.app, ablate_cmd.overrides, "--w-grid", "Guidance strengths",
      [](RunConfig& c, const std::vector<double>& v) { c.eval.w_grid = v; })
      ->delimiter(',');

  Command baseline_cmd{app.add_subcommand("baseline", "Train and evaluate the classifier baseline")};
  add_common(baseline_cmd);
  override_option<std::size_t>(baseline_cmd.app, baseline_cmd.overrides, "--dim", "Embedding dimension",
                               [](RunConfig& c, std::size_t v) { c.model.dim = v; });
  override_option<std::size_t>(baseline_cmd.app, baseline_cmd.overrides, "--epochs", "Epochs",
                               [](RunConfig& c, std::size_t v) { c.baseline.epochs = v; });
  override_option<std::size_t>(baseline_cmd.app, baseline_cmd.overrides, "--batch-size", "Batch size",
                               [](RunConfig& c, std::size_t v) { c.baseline.batch_size = v; });
  override_option<double>(baseline_cmd.app, baseline_cmd.overrides, "--lr", "Learning rate",
                          [](RunConfig& c, double v) { c.baseline.learning_rate = v; });
  override_option<double>(baseline_cmd.app, baseline_cmd.overrides, "--l2", "L2 strength",
                          [](RunConfig& c, double v) { c.baseline.l2 = v; });
  override_option<std::size_t>(baseline_cmd.app, baseline_cmd.overrides, "-k,--k", "Top-K cut-off",
                               [](RunConfig& c, std::size_t v) { c.eval.k = v; });
  override_option<std::string>(baseline_cmd.app, baseline_cmd.overrides, "--split", "Evaluation split",
                               [](RunConfig& c, const std::string& v) { c.eval.split = v; });
  baseline_cmd.app->add_option("--out", out_file, "Metrics CSV to write");
  auto negatives = std::make_shared<bool>(true);
  CLI::Option* negatives_flag = baseline_cmd.app->add_flag(
      "--negatives,!--no-negatives", *negatives, "Use 1:1 uniform negative sampling (default on)");
  baseline_cmd.overrides.push_back([negatives, negatives_flag](RunConfig& c) {
    if (negatives_flag->count() > 0) c.baseline.use_negatives = *negatives;
  });

  Command export_cmd{app.add_subcommand("export", "Write item embeddings as CSV")};
  add_common(export_cmd);
  export_cmd.app->add_option("--checkpoint", checkpoint, "Checkpoint (default: best.ckpt)");
  export_cmd.app->add_option("--out", out_file, "Embedding CSV to write");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  Command* active = nullptr;
  for (Command* cmd : {&prepare, &train_cmd, &eval_cmd, &ablate_cmd, &baseline_cmd, &export_cmd}) {
    if (cmd->app->parsed()) active = cmd;
  }
  auto opt_path = [](const std::string& s) {
    return s.empty() ? std::optional<fs::path>() : std::optional<fs::path>(s);
  };

  try {
    RunConfig config = active->config_path.empty() ? RunConfig{} : load_run_config(active->config_path);
    for (const auto& apply : active->overrides) apply(config);
    if (active == &prepare && synthetic) config.data.source = "synthetic";

    if (active == &prepare) {
      cmd_prepare(config, opt_path(log_out), out, err);
    } else if (active == &train_cmd) {
      cmd_train(config, resume, out);
    } else if (active == &eval_cmd) {
      cmd_eval(config, "eval", opt_path(checkpoint), opt_path(out_file), eval_grid->count() > 0, out, err);
    } else if (active == &ablate_cmd) {
      cmd_eval(config, "ablate", opt_path(checkpoint), opt_path(out_file), true, out, err);
    } else if (active == &baseline_cmd) {
      cmd_baseline(config, opt_path(out_file), out);
    } else {
      cmd_export(config, opt_path(checkpoint), opt_path(out_file), out);
    }
  } catch (const ConfigError& e) {
    return fail(err, kUsageError, e.what());
  } catch (const ContractError& e) {
    return fail(err, kUsageError, e.what());
  } catch (const NumericAbort& e) {
    return fail(err, kNumericAbort, e.what());
  } catch (const IoError& e) {
    return fail(err, kDataError, e.what());
  } catch (const FormatError& e) {
    return fail(err, kDataError, e.what());
  } catch (const EmptyInputError& e) {
    return fail(err, kDataError, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(err, kDataError, e.what());
  } catch (const std::exception& e) {
    return fail(err, kUsageError, e.what());
  }
  return kOk;
}

}  // namespace dreamrec::cli
