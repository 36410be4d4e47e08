#include <doctest.h>

#include <string>
#include <vector>

#include "dreamrec/data.hpp"
#include "dreamrec/diffusion.hpp"
#include "dreamrec/gradcheck.hpp"
#include "dreamrec/model.hpp"

using namespace dreamrec;
using num::Graph;
using num::Tensor;
using num::Var;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.num_items = 12;
  c.dim = 8;
  c.window = 5;
  return c;
}

template <typename Real>
Tensor<Real> random_rows(std::size_t rows, std::size_t dim, std::uint64_t salt) {
  Rng rng = Rng::stream(4, StreamPurpose::kTest, salt, 0);
  Tensor<Real> t({rows, dim});
  for (auto& v : t.values()) v = static_cast<Real>(rng.normal());
  return t;
}

template <typename Real>
std::vector<num::Parameter<Real>*> with_prefix(const num::ParameterSet<Real>& params,
                                               const std::string& prefix) {
  std::vector<num::Parameter<Real>*> out;
  for (auto* p : params.all()) {
    if (p->name.rfind(prefix, 0) == 0) out.push_back(p);
  }
  return out;
}

/// 32-bit gradients against 64-bit central differences of the same function.
template <typename Fn>
double check_32bit(DreamRecModel<float>& model, const std::string& prefix, Fn&& fn) {
  DreamRecModel<double> ref(model.config(), 0);
  num::LossBuilder<float> build = [&](Graph<float>& g) { return fn(g, model); };
  auto reference = [&]() {
    num::copy_parameter_values(ref.parameters(), model.parameters());
    Graph<double> g(num::GradMode::kDisabled);
    return g.value(fn(g, ref)).item();
  };
  num::GradCheckOptions options;
  options.step = 1e-3;
  options.floor = 1e-4;
  options.coordinates_per_parameter = 8;
  const auto params = with_prefix(model.parameters(), prefix);
  const auto report = num::grad_check<float>(build, params, options, reference);
  CHECK(report.coordinates_checked >= 50);
  return report.max_rel_error;
}

const std::vector<ItemIndex> kHistories = {0, 0, 3, 7, 2, 0, 0, 0, 0, 9, 1, 4, 4, 8, 11};

}  // namespace

TEST_CASE("embedding lookup returns table rows and validates ids") {
  DreamRecModel<float> model(small_config(), 1);
  Graph<float> g(num::GradMode::kDisabled);
  const std::vector<ItemIndex> ids = {3, 3, 3};
  const auto& rows = g.value(model.items().lookup(g, ids));
  REQUIRE(rows.rows() == 3);
  for (std::size_t r = 1; r < 3; ++r) {
    for (std::size_t j = 0; j < 8; ++j) CHECK(rows[r * 8 + j] == rows[j]);
  }
  const auto row3 = model.items().row(3);
  for (std::size_t j = 0; j < 8; ++j) CHECK(rows[j] == row3[j]);
  const std::vector<ItemIndex> bad = {13};
  CHECK_THROWS_AS(model.items().lookup(g, bad), ContractError);
}

TEST_CASE("padding masks mark exactly the padding positions") {
  DreamRecModel<float> model(small_config(), 1);
  Graph<float> g(num::GradMode::kDisabled);
  const std::vector<ItemIndex> all_pad(5, 0);
  const auto e1 = embed_sequences(g, model.items(), all_pad, 5);
  CHECK(e1.padding == std::vector<std::uint8_t>(5, 1));
  const std::vector<ItemIndex> one = {0, 0, 0, 0, 6};
  const auto e2 = embed_sequences(g, model.items(), one, 5);
  CHECK(e2.padding == std::vector<std::uint8_t>{1, 1, 1, 1, 0});
  CHECK(pooling_positions(e2.padding, 1, 5) == std::vector<std::size_t>{4});
  CHECK(pooling_positions(e1.padding, 1, 5) == std::vector<std::size_t>{4});
  const std::vector<ItemIndex> mid = {0, 2, 5, 0, 0};
  const auto e3 = embed_sequences(g, model.items(), mid, 5);
  CHECK(pooling_positions(e3.padding, 1, 5) == std::vector<std::size_t>{2});
}

TEST_CASE("guidance is deterministic, finite for empty histories and has dimension d") {
  DreamRecModel<float> a(small_config(), 3);
  DreamRecModel<float> b(small_config(), 3);
  const std::vector<ItemIndex> h = {0, 0, 1, 5, 9};
  const auto ca = a.encode_history(h);
  CHECK(ca == b.encode_history(h));
  CHECK(ca.size() == 8);
  const auto empty = a.encode_history(std::vector<ItemIndex>(5, 0));
  CHECK(empty.size() == 8);
  CHECK(empty.all_finite());
  DreamRecModel<float> c(small_config(), 4);
  CHECK_FALSE(ca == c.encode_history(h));
}

TEST_CASE("padding contents never influence the guidance") {
  DreamRecModel<double> model(small_config(), 2);
  const std::vector<ItemIndex> h = {0, 0, 4, 1, 10};
  const auto before = model.encode_history(h);
  Graph<double> g0(num::GradMode::kDisabled);
  const auto batch_before = g0.value(model.guidance(g0, kHistories));

  auto& table = model.items().weights().value;
  Rng rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    for (std::size_t j = 0; j < 8; ++j) table[j] = 10.0 * rng.normal();
    CHECK(model.encode_history(h) == before);
    Graph<double> g(num::GradMode::kDisabled);
    CHECK(g.value(model.guidance(g, kHistories)) == batch_before);
  }
}

TEST_CASE("batched guidance equals per-window guidance") {
  DreamRecModel<double> model(small_config(), 5);
  Graph<double> g(num::GradMode::kDisabled);
  const auto batch = g.value(model.guidance(g, kHistories));
  for (std::size_t b = 0; b < 3; ++b) {
    const std::span<const ItemIndex> h(kHistories.data() + b * 5, 5);
    const auto single = model.encode_history(h);
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(batch[b * 8 + j] == doctest::Approx(single[j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("denoiser output depends on the step and is deterministic") {
  DreamRecModel<float> model(small_config(), 0);
  const auto xt = random_rows<float>(1, 8, 1).reshaped({8});
  const auto c = random_rows<float>(1, 8, 2).reshaped({8});
  const auto at1 = model.denoise(xt, c, 1);
  CHECK(at1 == model.denoise(xt, c, 1));
  CHECK(at1.size() == 8);
  CHECK_FALSE(at1 == model.denoise(xt, c, 100));
  CHECK_THROWS_AS(model.denoise(xt, c, 0), ContractError);
}

TEST_CASE("initialization is reproducible from the seed") {
  DreamRecModel<float> a(small_config(), 17);
  DreamRecModel<float> b(small_config(), 17);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters().all()[i]->value == b.parameters().all()[i]->value);
  }
  CHECK(a.dummy_guidance() == b.dummy_guidance());
}

TEST_CASE("model configuration is validated") {
  ModelConfig c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(DreamRecModel<float>(c, 0), ContractError);
  c = small_config();
  c.num_items = 0;
  CHECK_THROWS_AS(DreamRecModel<float>(c, 0), ContractError);
}

TEST_CASE("encoder gradients match finite differences in 32-bit") {
  DreamRecModel<float> model(small_config(), 0);
  auto fn = []<typename Real>(Graph<Real>& g, DreamRecModel<Real>& m) {
    const Var c = m.guidance(g, kHistories);
    return g.sum(g.mul(c, g.constant(random_rows<Real>(3, 8, 9))));
  };
  CHECK(check_32bit(model, "encoder.", fn) <= 1e-3);
}

TEST_CASE("denoiser gradients match finite differences in 32-bit") {
  DreamRecModel<float> model(small_config(), 0);
  auto fn = []<typename Real>(Graph<Real>& g, DreamRecModel<Real>& m) {
    const std::vector<int> steps = {1, 40, 100};
    const Var xt = g.constant(random_rows<Real>(3, 8, 11));
    const Var c = g.constant(random_rows<Real>(3, 8, 12));
    const Var target = g.constant(random_rows<Real>(3, 8, 13));
    const Var diff = g.sub(target, m.denoiser().predict(g, xt, c, steps));
    return g.sum(g.mul(diff, diff));
  };
  CHECK(check_32bit(model, "denoiser.", fn) <= 1e-3);
}

TEST_CASE("dummy guidance receives gradient only when guidance is dropped") {
  const ModelConfig config = small_config();
  const Schedule schedule = Schedule::linear(20);
  const DiffusionConfig dc;
  const std::vector<ItemIndex> h(kHistories.begin(), kHistories.begin() + 10);
  const std::vector<ItemIndex> targets = {5, 6};
  for (bool dropped : {true, false}) {
    CAPTURE(dropped);
    DreamRecModel<float> model(config, 0);
    std::vector<TrainingDraw> draws;
    for (std::uint64_t i = 0; i < 2; ++i) {
      Rng rng = Rng::stream(0, StreamPurpose::kTest, 1, i);
      draws.push_back(draw_training(rng, config.dim, 20, 0.0));
      draws.back().unconditional = dropped;
    }
    Graph<float> g;
    g.backward(training_loss(g, model, schedule, dc, h, targets, draws).loss);
    const auto& grad = model.encoder().dummy_parameter().grad;
    bool any = false;
    for (float v : grad.values()) any = any || v != 0.0f;
    CHECK(any == dropped);
    if (dropped) {
      // Every example took the dummy branch: the encoder proper is untouched.
      for (auto* p : model.parameters().all()) {
        if (p->name.rfind("encoder.", 0) != 0 || p->name == "encoder.dummy") continue;
        for (float v : p->grad.values()) REQUIRE(v == 0.0f);
      }
    }
  }
}
