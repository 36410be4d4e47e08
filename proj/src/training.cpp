#include "dreamrec/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "dreamrec/errors.hpp"

namespace dreamrec {

using num::AdamWState;
using num::Container;
using num::Graph;
using num::Tensor;

namespace {

std::string hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_double(const std::string& text, const std::string& key) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size()) {
    throw FormatError("checkpoint metadata '" + key + "' is not a number: " + text);
  }
  return v;
}

std::uint64_t parse_u64(const std::string& text, const std::string& key) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (text.empty() || used != text.size()) {
    throw FormatError("checkpoint metadata '" + key + "' is not an integer: " + text);
  }
  return v;
}

const char* weighting_name(LossWeighting w) {
  return w == LossWeighting::kSimple ? "simple" : "variational";
}

LossWeighting parse_weighting(const std::string& s) {
  if (s == "simple") return LossWeighting::kSimple;
  if (s == "variational") return LossWeighting::kVariational;
  throw FormatError("checkpoint: unknown loss weighting '" + s + "'");
}

}  // namespace

std::vector<std::pair<std::string, std::string>> model_metadata(const ModelConfig& m) {
  return {
      {"model.num_items", std::to_string(m.num_items)},
      {"model.dim", std::to_string(m.dim)},
      {"model.window", std::to_string(m.window)},
      {"model.heads", std::to_string(m.heads)},
      {"model.layers", std::to_string(m.layers)},
      {"model.ffn_mult", std::to_string(m.ffn_mult)},
      {"model.hidden_mult", std::to_string(m.hidden_mult)},
      {"model.embedding_init_std", hex(m.embedding_init_std)},
  };
}

ModelConfig read_model_config(const Container& c) {
  ModelConfig m;
  auto u = [&](const char* key) { return parse_u64(c.require_meta(key), key); };
  m.num_items = u("model.num_items");
  m.dim = u("model.dim");
  m.window = u("model.window");
  m.heads = u("model.heads");
  m.layers = u("model.layers");
  m.ffn_mult = u("model.ffn_mult");
  m.hidden_mult = u("model.hidden_mult");
  m.embedding_init_std =
      parse_double(c.require_meta("model.embedding_init_std"), "model.embedding_init_std");
  return m;
}

namespace {

std::vector<std::pair<std::string, std::string>> config_metadata(
    const ModelConfig& m, const ScheduleConfig& s, const DiffusionConfig& d) {
  auto out = model_metadata(m);
  out.insert(out.end(), {
                            {"schedule.steps", std::to_string(s.steps)},
                            {"schedule.beta_start", hex(s.beta_start)},
                            {"schedule.beta_end", hex(s.beta_end)},
                            {"diffusion.p_uncond", hex(d.p_uncond)},
                            {"diffusion.guidance", hex(d.guidance)},
                            {"diffusion.weighting", weighting_name(d.weighting)},
                        });
  return out;
}

std::string history_text(const std::vector<EpochRecord>& epochs) {
  std::string out;
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + ' ' + hex(e.loss) + ' ' + hex(e.hr) + ' ' + hex(e.ndcg) + '\n';
  }
  return out;
}

std::vector<EpochRecord> parse_history(const std::string& text) {
  std::vector<EpochRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string epoch, loss, hr, ndcg;
    if (!(fields >> epoch >> loss >> hr >> ndcg)) throw FormatError("checkpoint: bad history line");
    EpochRecord r;
    r.epoch = parse_u64(epoch, "history");
    r.loss = parse_double(loss, "history");
    r.hr = parse_double(hr, "history");
    r.ndcg = parse_double(ndcg, "history");
    out.push_back(r);
  }
  return out;
}

void append_optimizer(Container& c, const Model& model, const AdamWState<float>& opt) {
  const auto params = model.parameters().all();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = opt.first_moment[i];
    const auto& v = opt.second_moment[i];
    c.entries.push_back({"adam.m/" + params[i]->name, m.shape(),
                         std::vector<float>(m.values().begin(), m.values().end())});
    c.entries.push_back({"adam.v/" + params[i]->name, v.shape(),
                         std::vector<float>(v.values().begin(), v.values().end())});
  }
}

Tensor<float> optimizer_entry(const Container& c, const std::string& name, const num::Shape& shape) {
  const auto* e = c.find(name);
  if (!e) throw FormatError("checkpoint: missing optimizer entry '" + name + "'");
  if (e->shape != shape) throw FormatError("checkpoint: shape mismatch for '" + name + "'");
  Tensor<float> t(shape);
  std::copy(e->values.begin(), e->values.end(), t.data());
  return t;
}

std::string abort_message(std::size_t epoch, std::int64_t step, double loss,
                          std::span<const std::uint64_t> ids, const std::vector<double>& recent) {
  std::ostringstream os;
  os << "non-finite training loss " << loss << " at epoch " << epoch << ", optimizer step "
     << step << "\n  batch example ids:";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i == 32) {
      os << " ... (" << ids.size() << " total)";
      break;
    }
    os << ' ' << ids[i];
  }
  os << "\n  recent batch losses:";
  for (double l : recent) os << ' ' << l;
  return os.str();
}

}  // namespace

void TrainConfig::validate() const {
  require_seed();
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("train.learning_rate must be a finite value >= 0");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ConfigError("train.weight_decay must be a finite value >= 0");
  }
  if (eval_k < 1) throw ConfigError("eval.k must be >= 1");
  if (eval_workers < 1) throw ConfigError("eval.workers must be >= 1");
  if (eval_batch_size < 1) throw ConfigError("eval.batch_size must be >= 1");
  try {
    schedule.build();
    diffusion.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
}

std::uint64_t TrainConfig::require_seed() const {
  if (!seed) throw ConfigError("seed is required");
  return *seed;
}

std::string TrainReport::csv() const {
  std::string out = "epoch,loss,hr,ndcg\n";
  char line[160];
  for (const auto& e : epochs) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.8f,%.8f\n", e.epoch, e.loss, e.hr, e.ndcg);
    out += line;
  }
  return out;
}

std::string TrainReport::timing_csv() const {
  std::string out = "epoch,seconds\n";
  char line[96];
  for (const auto& e : epochs) {
    std::snprintf(line, sizeof line, "%zu,%.3f\n", e.epoch, e.seconds);
    out += line;
  }
  return out;
}

std::string TrainReport::summary() const {
  std::ostringstream os;
  os << "epochs run: " << epochs.size() << "\n";
  if (!epochs.empty()) {
    os << "final train loss: " << epochs.back().loss << "\n";
  }
  if (best_epoch > 0) {
    const auto& b = epochs[best_epoch - epochs.front().epoch];
    os << "best epoch: " << best_epoch << " (validation HR@" << k << " = " << b.hr << ", NDCG@"
       << k << " = " << b.ndcg << ")\n";
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", wall_seconds);
  os << "wall time: " << buf << " s\n";
  return os.str();
}

std::uint64_t config_fingerprint(const ModelConfig& model, const ScheduleConfig& schedule,
                                 const DiffusionConfig& diffusion) {
  std::string text;
  for (const auto& [k, v] : config_metadata(model, schedule, diffusion)) {
    text += k + '=' + v + ';';
  }
  return num::fnv1a64(text);
}

static Container checkpoint_container(const Model& model, const AdamWState<float>* optimizer,
                                      const ScheduleConfig& schedule, const DiffusionConfig& diffusion,
                                      const std::vector<std::pair<std::string, std::string>>& extra) {
  Container c;
  c.fingerprint = config_fingerprint(model.config(), schedule, diffusion);
  c.metadata = config_metadata(model.config(), schedule, diffusion);
  c.metadata.emplace_back("format", "dreamrec");
  if (optimizer) {
    c.metadata.emplace_back("optimizer.step", std::to_string(optimizer->step));
    c.metadata.emplace_back("optimizer.learning_rate", hex(optimizer->config.learning_rate));
    c.metadata.emplace_back("optimizer.weight_decay", hex(optimizer->config.weight_decay));
  }
  c.metadata.insert(c.metadata.end(), extra.begin(), extra.end());
  num::append_parameters(c, model.parameters(), "model/");
  if (optimizer) append_optimizer(c, model, *optimizer);
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const AdamWState<float>* optimizer, const ScheduleConfig& schedule,
                     const DiffusionConfig& diffusion,
                     const std::vector<std::pair<std::string, std::string>>& extra) {
  num::write_container(path, checkpoint_container(model, optimizer, schedule, diffusion, extra));
}

namespace {

ScheduleConfig read_schedule(const Container& c) {
  ScheduleConfig s;
  s.steps = static_cast<int>(parse_u64(c.require_meta("schedule.steps"), "schedule.steps"));
  s.beta_start = parse_double(c.require_meta("schedule.beta_start"), "schedule.beta_start");
  s.beta_end = parse_double(c.require_meta("schedule.beta_end"), "schedule.beta_end");
  return s;
}

DiffusionConfig read_diffusion(const Container& c) {
  DiffusionConfig d;
  d.p_uncond = parse_double(c.require_meta("diffusion.p_uncond"), "diffusion.p_uncond");
  d.guidance = parse_double(c.require_meta("diffusion.guidance"), "diffusion.guidance");
  d.weighting = parse_weighting(c.require_meta("diffusion.weighting"));
  return d;
}

}  // namespace

void restore_checkpoint(const Container& container, Model& model, AdamWState<float>* optimizer,
                        const ScheduleConfig& schedule, const DiffusionConfig& diffusion,
                        const std::function<void(const std::string&)>& warning) {
  const std::uint64_t expected = config_fingerprint(model.config(), schedule, diffusion);
  if (container.fingerprint != expected && warning) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "checkpoint fingerprint %016llx differs from configuration fingerprint %016llx",
                  static_cast<unsigned long long>(container.fingerprint),
                  static_cast<unsigned long long>(expected));
    warning(buf);
  }
  num::load_parameters(container, model.parameters(), "model/");
  if (optimizer) {
    const auto params = model.parameters().all();
    AdamWState<float> state = AdamWState<float>::init(params, optimizer->config);
    state.step = static_cast<std::int64_t>(
        parse_u64(container.require_meta("optimizer.step"), "optimizer.step"));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& shape = params[i]->value.shape();
      state.first_moment[i] = optimizer_entry(container, "adam.m/" + params[i]->name, shape);
      state.second_moment[i] = optimizer_entry(container, "adam.v/" + params[i]->name, shape);
    }
    *optimizer = std::move(state);
  }
}

CheckpointContents load_checkpoint(const std::filesystem::path& path) {
  CheckpointContents out;
  out.container = num::read_container(path);
  const Container& c = out.container;
  if (const auto* f = c.meta("format"); !f || *f != "dreamrec") {
    throw FormatError("'" + path.string() + "' is not a DreamRec checkpoint");
  }
  out.model_config = read_model_config(c);
  out.schedule = read_schedule(c);
  out.diffusion = read_diffusion(c);
  out.fingerprint = c.fingerprint;
  try {
    out.model_config.validate();
  } catch (const ContractError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  out.model = std::make_unique<Model>(out.model_config, 0);
  if (c.meta("optimizer.step")) {
    num::AdamWConfig oc;
    oc.learning_rate =
        parse_double(c.require_meta("optimizer.learning_rate"), "optimizer.learning_rate");
    oc.weight_decay =
        parse_double(c.require_meta("optimizer.weight_decay"), "optimizer.weight_decay");
    out.optimizer = AdamWState<float>::init(out.model->parameters().all(), oc);
    restore_checkpoint(c, *out.model, &*out.optimizer, out.schedule, out.diffusion);
  } else {
    restore_checkpoint(c, *out.model, nullptr, out.schedule, out.diffusion);
  }
  return out;
}

TrainResult train(const SequenceDataset& dataset, const TrainConfig& config,
                  const std::optional<std::filesystem::path>& resume_from,
                  const TrainHooks& hooks) {
  config.validate();
  if (dataset.train.empty()) throw EmptyInputError("train: training split is empty");
  if (dataset.validation.empty()) throw EmptyInputError("train: validation split is empty");
  const std::uint64_t seed = config.require_seed();
  const auto wall_start = std::chrono::steady_clock::now();

  ModelConfig mc = config.model;
  mc.num_items = dataset.num_items();
  mc.window = dataset.window;
  const Schedule schedule = config.schedule.build();
  const int T = schedule.steps();

  auto model = std::make_unique<Model>(mc, seed);
  auto& params = model->parameters();
  num::AdamWConfig oc;
  oc.learning_rate = config.learning_rate;
  oc.weight_decay = config.weight_decay;
  AdamWState<float> opt = AdamWState<float>::init(params.all(), oc);

  TrainReport report;
  report.k = config.eval_k;
  std::vector<Tensor<float>> best = params.snapshot();
  std::size_t first_epoch = 0;

  if (resume_from) {
    const Container c = num::read_container(*resume_from);
    restore_checkpoint(c, *model, &opt, config.schedule, config.diffusion);
    if (c.fingerprint != config_fingerprint(mc, config.schedule, config.diffusion)) {
      throw ConfigError("resume: checkpoint '" + resume_from->string() +
                        "' was written with a different model configuration");
    }
    first_epoch = parse_u64(c.require_meta("train.epoch"), "train.epoch");
    report.epochs = parse_history(c.require_meta("train.history"));
    report.best_epoch = parse_u64(c.require_meta("train.best_epoch"), "train.best_epoch");
    report.best_hr = parse_double(c.require_meta("train.best_hr"), "train.best_hr");
    Model best_model(mc, 0);
    num::load_parameters(c, best_model.parameters(), "best/");
    best = best_model.parameters().snapshot();
  }

  const std::size_t n = dataset.train.size();
  const std::size_t d = mc.dim;
  const std::size_t L = mc.window;
  EvalOptions eval;
  eval.k = config.eval_k;
  eval.w = config.diffusion.guidance;
  eval.seed = config.validation_seed();
  eval.workers = config.eval_workers;
  eval.batch_size = config.eval_batch_size;
  if (eval.k > mc.num_items) {
    throw ConfigError("eval.k=" + std::to_string(eval.k) + " exceeds the " +
                      std::to_string(mc.num_items) + " items of the dataset");
  }

  std::vector<double> recent;
  std::size_t run_this_call = 0;
  for (std::size_t epoch = first_epoch; epoch < config.epochs; ++epoch) {
    if (hooks.stop_after && run_this_call >= *hooks.stop_after) break;
    const auto epoch_start = std::chrono::steady_clock::now();

    std::vector<std::uint64_t> order(n);
    std::iota(order.begin(), order.end(), std::uint64_t{0});
    Rng shuffle = Rng::stream(seed, StreamPurpose::kShuffle, epoch, 0);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0.0;
    std::vector<ItemIndex> histories, targets;
    for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
      const std::size_t end = std::min(n, begin + config.batch_size);
      const std::span<const std::uint64_t> ids(order.data() + begin, end - begin);
      histories.clear();
      targets.clear();
      for (std::uint64_t id : ids) {
        const auto& ex = dataset.train[id];
        if (ex.history.size() != L) throw ContractError("train: history window mismatch");
        histories.insert(histories.end(), ex.history.begin(), ex.history.end());
        targets.push_back(ex.target);
      }
      const auto draws = draw_training_batch({seed, epoch}, ids, d, T, config.diffusion.p_uncond);

      Graph<float> g;
      const auto terms = training_loss(g, *model, schedule, config.diffusion, histories, targets, draws);
      const double loss = g.value(terms.loss).item();
      if (!std::isfinite(loss)) {
        throw NumericAbort(abort_message(epoch + 1, opt.step, loss, ids, recent));
      }
      recent.push_back(loss);
      if (recent.size() > 10) recent.erase(recent.begin());
      g.backward(terms.loss);
      num::adamw_step(params.all(), opt);
      params.zero_grad();
      loss_sum += loss * static_cast<double>(ids.size());
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.loss = loss_sum / static_cast<double>(n);
    const MetricsReport val = evaluate(*model, schedule, dataset.validation, eval);
    rec.hr = val.hr;
    rec.ndcg = val.ndcg;
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    report.epochs.push_back(rec);

    const bool improved = rec.hr > report.best_hr;
    if (improved) {
      report.best_hr = rec.hr;
      report.best_epoch = rec.epoch;
      best = params.snapshot();
    }

    if (!config.checkpoint_dir.empty()) {
      std::filesystem::create_directories(config.checkpoint_dir);
      const std::vector<std::pair<std::string, std::string>> bookkeeping = {
          {"train.epoch", std::to_string(rec.epoch)},
          {"train.best_epoch", std::to_string(report.best_epoch)},
          {"train.best_hr", hex(report.best_hr)},
          {"train.history", history_text(report.epochs)},
      };
      if (improved) {
        save_checkpoint(config.checkpoint_dir / "best.ckpt", *model, nullptr, config.schedule,
                        config.diffusion, bookkeeping);
      }
      Container last = checkpoint_container(*model, &opt, config.schedule, config.diffusion,
                                            bookkeeping);
      Model best_model(mc, 0);
      best_model.parameters().restore(best);
      num::append_parameters(last, best_model.parameters(), "best/");
      num::write_container(config.checkpoint_dir / "last.ckpt", last);
    }

    if (hooks.on_epoch) hooks.on_epoch(rec);
    ++run_this_call;
  }

  params.restore(best);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  return {std::move(model), std::move(report)};
}

}  // namespace dreamrec
