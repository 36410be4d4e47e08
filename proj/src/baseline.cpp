#include "dreamrec/baseline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "dreamrec/checkpoint.hpp"
#include "dreamrec/errors.hpp"
#include "dreamrec/optim.hpp"

namespace dreamrec {

using num::Graph;
using num::Tensor;
using num::Var;

ClassifierModel::ClassifierModel(const ModelConfig& config, std::uint64_t seed)
    : config_((config.validate(), config)),
      items_(params_, "items", config.num_items, config.dim, config.embedding_init_std, seed),
      encoder_(params_, "encoder", config, seed) {}

Var ClassifierModel::encode(Graph<float>& g, std::span<const ItemIndex> histories) const {
  return encoder_.encode(g, embed_sequences(g, items_, histories, config_.window));
}

std::vector<ItemIndex> sample_negatives(std::span<const ItemIndex> targets, std::size_t num_items,
                                        std::span<Rng> streams) {
  if (num_items < 2) {
    throw ContractError("sample_negatives: a vocabulary of " + std::to_string(num_items) +
                        " item(s) has no negative to draw");
  }
  if (streams.size() != targets.size()) throw ContractError("sample_negatives: one stream per target");
  std::vector<ItemIndex> out(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    ItemIndex neg;
    do {
      neg = static_cast<ItemIndex>(1 + streams[i].below(num_items));
    } while (neg == targets[i]);
    out[i] = neg;
  }
  return out;
}

Var bce_loss(Graph<float>& g, const ClassifierModel& model, std::span<const ItemIndex> histories,
             std::span<const ItemIndex> targets, std::span<const ItemIndex> negatives) {
  if (targets.empty()) throw ContractError("bce_loss: empty batch");
  if (!negatives.empty() && negatives.size() != targets.size()) {
    throw ContractError("bce_loss: one negative per target expected");
  }
  const Var c = model.encode(g, histories);
  const Var pos = g.row_sum(g.mul(c, model.items().lookup(g, targets)));
  Var per_example = g.scale(g.activation(pos, num::Activation::kLogSigmoid), -1.0f);
  if (!negatives.empty()) {
    const Var neg = g.row_sum(g.mul(c, model.items().lookup(g, negatives)));
    per_example = g.sub(per_example, g.activation(g.scale(neg, -1.0f), num::Activation::kLogSigmoid));
  }
  return g.mean(per_example);
}

MetricsReport evaluate_classifier(const ClassifierModel& model,
                                  std::span<const SequenceExample> examples, std::size_t k,
                                  bool exclude_history) {
  if (examples.empty()) throw EmptyInputError("evaluate_classifier: split is empty");
  if (k < 1 || k > model.items().num_items()) {
    throw ContractError("evaluate_classifier: K=" + std::to_string(k) + " outside [1, " +
                        std::to_string(model.items().num_items()) + "]");
  }
  const std::size_t d = model.config().dim;
  constexpr std::size_t kChunk = 256;
  std::vector<ExampleScore> scores(examples.size());
  for (std::size_t begin = 0; begin < examples.size(); begin += kChunk) {
    const auto slice = examples.subspan(begin, std::min(kChunk, examples.size() - begin));
    Graph<float> g(num::GradMode::kDisabled);
    const Tensor<float> c = g.value(model.encode(g, flatten_histories(slice)));
    for (std::size_t r = 0; r < slice.size(); ++r) {
      const RankedList ranked = retrieve_topk(
          std::span<const float>(c.data() + r * d, d), model.items(), k,
          exclude_history ? std::span<const ItemIndex>(slice[r].history)
                          : std::span<const ItemIndex>());
      const auto rank = ranked.rank_of(slice[r].target);
      scores[begin + r] = {rank ? 1 : 0, ndcg_at_k(rank, k)};
    }
  }
  return summarize(scores, k, 0.0, 0);
}

void BaselineConfig::validate() const {
  if (!seed) throw ConfigError("seed is required");
  if (epochs < 1) throw ConfigError("baseline.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("baseline.batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("baseline.learning_rate must be a finite value >= 0");
  }
  if (!(l2 >= 0.0) || !std::isfinite(l2)) throw ConfigError("baseline.l2 must be >= 0");
  if (eval_k < 1) throw ConfigError("eval.k must be >= 1");
}

BaselineResult train_classifier(const SequenceDataset& dataset, const BaselineConfig& config,
                                const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  if (dataset.train.empty()) throw EmptyInputError("baseline: training split is empty");
  if (dataset.validation.empty()) throw EmptyInputError("baseline: validation split is empty");
  const std::uint64_t seed = *config.seed;
  const auto wall_start = std::chrono::steady_clock::now();

  ModelConfig mc = config.model;
  mc.num_items = dataset.num_items();
  mc.window = dataset.window;
  if (config.eval_k > mc.num_items) {
    throw ConfigError("eval.k=" + std::to_string(config.eval_k) + " exceeds the " +
                      std::to_string(mc.num_items) + " items of the dataset");
  }
  auto model = std::make_unique<ClassifierModel>(mc, seed);
  auto& params = model->parameters();
  num::AdamWConfig oc;
  oc.learning_rate = config.learning_rate;
  oc.weight_decay = config.l2;
  auto opt = num::AdamWState<float>::init(params.all(), oc);

  BaselineResult result;
  result.report.k = config.eval_k;
  std::vector<Tensor<float>> best = params.snapshot();
  const std::size_t n = dataset.train.size();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    std::vector<std::uint64_t> order(n);
    std::iota(order.begin(), order.end(), std::uint64_t{0});
    Rng shuffle = Rng::stream(seed, StreamPurpose::kShuffle, epoch, 0);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
      const std::size_t end = std::min(n, begin + config.batch_size);
      std::vector<ItemIndex> histories, targets, negatives;
      std::vector<Rng> streams;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& ex = dataset.train[order[i]];
        histories.insert(histories.end(), ex.history.begin(), ex.history.end());
        targets.push_back(ex.target);
        streams.push_back(Rng::stream(seed, StreamPurpose::kNegative, epoch, order[i]));
      }
      if (config.use_negatives) negatives = sample_negatives(targets, mc.num_items, streams);

      Graph<float> g;
      const Var loss = bce_loss(g, *model, histories, targets, negatives);
      const double value = g.value(loss).item();
      if (!std::isfinite(value)) {
        throw NumericAbort("baseline: non-finite loss at epoch " + std::to_string(epoch + 1) +
                           ", optimizer step " + std::to_string(opt.step));
      }
      g.backward(loss);
      num::adamw_step(params.all(), opt);
      params.zero_grad();
      loss_sum += value * static_cast<double>(end - begin);
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.loss = loss_sum / static_cast<double>(n);
    const MetricsReport val = evaluate_classifier(*model, dataset.validation, config.eval_k);
    rec.hr = val.hr;
    rec.ndcg = val.ndcg;
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    result.report.epochs.push_back(rec);
    if (rec.hr > result.report.best_hr) {
      result.report.best_hr = rec.hr;
      result.report.best_epoch = rec.epoch;
      best = params.snapshot();
    }
    if (on_epoch) on_epoch(rec);
  }

  params.restore(best);
  result.model = std::move(model);
  result.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  return result;
}

void save_classifier(const std::filesystem::path& path, const ClassifierModel& model) {
  num::Container c;
  c.metadata = model_metadata(model.config());
  c.metadata.emplace_back("format", "dreamrec-classifier");
  std::string text;
  for (const auto& [k, v] : c.metadata) text += k + '=' + v + ';';
  c.fingerprint = num::fnv1a64(text);
  num::append_parameters(c, model.parameters(), "model/");
  num::write_container(path, c);
}

std::unique_ptr<ClassifierModel> load_classifier(const std::filesystem::path& path) {
  const num::Container c = num::read_container(path);
  if (const auto* f = c.meta("format"); !f || *f != "dreamrec-classifier") {
    throw FormatError("'" + path.string() + "' is not a classifier checkpoint");
  }
  auto model = std::make_unique<ClassifierModel>(read_model_config(c), 0);
  num::load_parameters(c, model->parameters(), "model/");
  return model;
}

}  // namespace dreamrec
