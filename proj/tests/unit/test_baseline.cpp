#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "dreamrec/baseline.hpp"
#include "support.hpp"

using namespace dreamrec;
using num::Graph;

namespace {

ModelConfig classifier_config(std::size_t items = 10) {
  ModelConfig c;
  c.num_items = items;
  c.dim = 8;
  c.window = 4;
  return c;
}

const std::vector<ItemIndex> kEmpty(8, 0);
const std::vector<ItemIndex> kTargets = {3, 6};
const std::vector<ItemIndex> kNegatives = {5, 1};

float loss_value(const ClassifierModel& m, std::span<const ItemIndex> histories,
                 std::span<const ItemIndex> negatives) {
  Graph<float> g(num::GradMode::kDisabled);
  return g.value(bce_loss(g, m, histories, kTargets, negatives)).item();
}

}  // namespace

TEST_CASE("zero scores give ln 2 per term") {
  ClassifierModel m(classifier_config(), 0);
  m.parameters().all()[0]->value.fill(0.0f);
  REQUIRE(m.parameters().all()[0]->name == "items");
  CHECK(loss_value(m, kEmpty, kNegatives) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-6));
  CHECK(loss_value(m, kEmpty, {}) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("saturated scores give a vanishing loss") {
  ClassifierModel m(classifier_config(), 0);
  Graph<float> g(num::GradMode::kDisabled);
  // Empty histories: the guidance does not depend on the item table.
  const auto c = g.value(m.encode(g, kEmpty));
  auto& table = m.parameters().all()[0]->value;
  const std::size_t d = 8;
  for (std::size_t b = 0; b < 2; ++b) {
    double norm2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm2 += c[b * d + j] * c[b * d + j];
    for (std::size_t j = 0; j < d; ++j) {
      const auto v = static_cast<float>(60.0 * c[b * d + j] / norm2);
      table[kTargets[b] * d + j] = v;
      table[kNegatives[b] * d + j] = -v;
    }
  }
  CHECK(loss_value(m, kEmpty, kNegatives) < 1e-6f);
}

TEST_CASE("negatives never equal their target") {
  std::vector<ItemIndex> targets(10000);
  std::vector<Rng> streams;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    targets[i] = static_cast<ItemIndex>(1 + i % 3);
    streams.push_back(Rng::stream(0, StreamPurpose::kNegative, 0, i));
  }
  const auto neg = sample_negatives(targets, 3, streams);
  std::set<ItemIndex> seen;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    REQUIRE(neg[i] != targets[i]);
    REQUIRE(neg[i] >= 1);
    REQUIRE(neg[i] <= 3);
    seen.insert(neg[i]);
  }
  CHECK(seen.size() == 3);

  const std::vector<ItemIndex> one = {1};
  std::vector<Rng> s1 = {Rng(1)};
  CHECK_THROWS_AS(sample_negatives(one, 1, s1), ContractError);
}

TEST_CASE("without negatives only target and history rows receive gradient") {
  ClassifierModel m(classifier_config(), 2);
  const std::vector<ItemIndex> histories = {0, 0, 2, 9, 0, 4, 4, 7};
  Graph<float> g;
  g.backward(bce_loss(g, m, histories, kTargets, {}));
  const std::set<ItemIndex> touched = {2, 9, 4, 7, 3, 6};
  const auto& grad = m.parameters().all()[0]->grad;
  for (ItemIndex i = 0; i <= 10; ++i) {
    bool nonzero = false;
    for (std::size_t j = 0; j < 8; ++j) nonzero = nonzero || grad[i * 8 + j] != 0.0f;
    CAPTURE(i);
    if (touched.count(i) == 0) CHECK_FALSE(nonzero);
  }
  bool target_nonzero = false;
  for (std::size_t j = 0; j < 8; ++j) target_nonzero = target_nonzero || grad[3 * 8 + j] != 0.0f;
  CHECK(target_nonzero);
}

TEST_CASE("classifier training is deterministic and ranks every item at K = |I|") {
  testing::TempDir dir("baseline");
  const auto data = testing::small_synthetic();
  BaselineConfig c;
  c.seed = 1;
  c.epochs = 2;
  c.batch_size = 64;
  c.model.dim = 16;
  c.eval_k = 5;
  const auto a = train_classifier(data, c);
  const auto b = train_classifier(data, c);
  CHECK(a.report.csv() == b.report.csv());
  CHECK(a.report.epochs.size() == 2);
  CHECK(evaluate_classifier(*a.model, data.test, data.num_items()).hr == 1.0);
  CHECK_THROWS_AS(evaluate_classifier(*a.model, data.test, data.num_items() + 1), ContractError);

  save_classifier(dir / "clf.ckpt", *a.model);
  const auto loaded = load_classifier(dir / "clf.ckpt");
  for (std::size_t i = 0; i < a.model->parameters().size(); ++i) {
    CHECK(loaded->parameters().all()[i]->value == a.model->parameters().all()[i]->value);
  }
  const auto ra = evaluate_classifier(*a.model, data.test, 5);
  const auto rl = evaluate_classifier(*loaded, data.test, 5);
  CHECK(ra.hr == rl.hr);
  CHECK(ra.ndcg == rl.ndcg);

  c.use_negatives = false;
  c.l2 = 1e-2;
  CHECK(train_classifier(data, c).report.csv() != a.report.csv());
  c.seed.reset();
  CHECK_THROWS_AS(train_classifier(data, c), ConfigError);
}
