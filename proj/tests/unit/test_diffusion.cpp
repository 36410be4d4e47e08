#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "dreamrec/diffusion.hpp"

using namespace dreamrec;
using num::Graph;
using num::Tensor;
using num::Var;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.num_items = 15;
  c.dim = 8;
  c.window = 4;
  return c;
}

const std::vector<ItemIndex> kHistory = {0, 3, 9, 2};
const std::vector<ItemIndex> kBatchHistories = {0, 3, 9, 2, 0, 0, 0, 7, 1, 1, 5, 6, 0, 12, 4, 4};
const std::vector<ItemIndex> kBatchTargets = {5, 8, 7, 15};

template <typename Real>
Tensor<Real> random_vec(std::size_t n, std::uint64_t salt) {
  Rng rng = Rng::stream(8, StreamPurpose::kTest, salt, 0);
  Tensor<Real> t({n});
  for (auto& v : t.values()) v = static_cast<Real>(rng.normal());
  return t;
}

std::vector<TrainingDraw> batch_draws(std::size_t n, int steps, double p_uncond) {
  std::vector<std::uint64_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::uint64_t{0});
  return draw_training_batch({0, 0}, ids, small_config().dim, steps, p_uncond);
}

/// Reference sampler that never evaluates the dummy branch.
Tensor<float> conditional_only(const DreamRecModel<float>& model, const Schedule& s,
                               const std::vector<ItemIndex>& history, Rng rng) {
  const std::size_t d = model.config().dim;
  Tensor<float> x({d});
  for (auto& v : x.values()) v = static_cast<float>(rng.normal());
  const Tensor<float> c = model.encode_history(history);
  for (int t = s.steps(); t >= 1; --t) {
    Tensor<float> out = posterior_mean(model.denoise(x, c, t), x, t, s);
    if (t > 1) {
      const auto sigma = static_cast<float>(std::sqrt(s.beta_tilde(t)));
      for (std::size_t j = 0; j < d; ++j) out[j] += sigma * static_cast<float>(rng.normal());
    }
    x = out;
  }
  return x;
}

}  // namespace

TEST_CASE("cfg_combine identities") {
  const Tensor<float> cond({1}, {1.0f});
  const Tensor<float> uncond({1}, {0.0f});
  CHECK(cfg_combine(cond, uncond, 2.0)[0] == 3.0f);
  const auto a = random_vec<float>(6, 1);
  const auto b = random_vec<float>(6, 2);
  CHECK(cfg_combine(a, b, 0.0) == a);
  for (double w : {0.5, 2.0, 10.0}) CHECK(cfg_combine(a, a, w) == a);
  const auto c = cfg_combine(a, b, 4.0);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(c[i] == doctest::Approx(5.0 * a[i] - 4.0 * b[i]).epsilon(1e-5));
  }
  CHECK_THROWS_AS(cfg_combine(a, b, -1.0), ContractError);
}

TEST_CASE("two-step reverse step value") {
  const Schedule s = Schedule::linear(2, 0.1, 0.2);
  const Tensor<double> one({1}, {1.0});
  const double mean = posterior_mean(one, one, 2, s)[0];
  CHECK(mean + std::sqrt(s.beta_tilde(2)) * 1.0 ==
        doctest::Approx(1.264330451591333).epsilon(1e-14));
}

TEST_CASE("p_sample_step at t = 1 returns the guided prediction exactly") {
  DreamRecModel<float> model(small_config(), 0);
  const Schedule s = Schedule::linear(10);
  const auto xt = random_vec<float>(8, 3);
  const auto c = random_vec<float>(8, 4);
  const Tensor<float> zero({8});
  for (double w : {0.0, 2.0, 7.5}) {
    CAPTURE(w);
    const auto cond = model.denoise(xt, c, 1);
    const auto uncond = model.denoise(xt, model.dummy_guidance(), 1);
    const auto expected = w == 0.0 ? cond : cfg_combine(cond, uncond, w);
    CHECK(p_sample_step(model, s, xt, 1, c, w, zero) == expected);
  }
  CHECK_THROWS_AS(p_sample_step(model, s, xt, 1, c, 2.0, random_vec<float>(8, 5)), ContractError);
  CHECK_THROWS_AS(p_sample_step(model, s, xt, 11, c, 2.0, zero), ContractError);
}

TEST_CASE("p_sample_step with z = 0 and w = 0 is the conditional posterior mean") {
  DreamRecModel<double> model(small_config(), 0);
  const Schedule s = Schedule::linear(10);
  const auto xt = random_vec<double>(8, 6);
  const auto c = random_vec<double>(8, 7);
  const auto step = p_sample_step(model, s, xt, 6, c, 0.0, Tensor<double>({8}));
  CHECK(step == posterior_mean(model.denoise(xt, c, 6), xt, 6, s));
}

TEST_CASE("generate is deterministic and runs the encoder once") {
  DreamRecModel<float> model(small_config(), 1);
  const Schedule s = Schedule::linear(20);
  Rng a = Rng::stream(3, StreamPurpose::kGenerate, 0, 0);
  Rng b = Rng::stream(3, StreamPurpose::kGenerate, 0, 0);
  const std::size_t calls = model.encoder().encode_calls();
  const auto x = generate(model, s, kHistory, 2.0, a);
  CHECK(model.encoder().encode_calls() == calls + 1);
  CHECK(x == generate(model, s, kHistory, 2.0, b));
  CHECK(x.size() == 8);
  CHECK(x.all_finite());
  Rng other = Rng::stream(4, StreamPurpose::kGenerate, 0, 0);
  CHECK_FALSE(x == generate(model, s, kHistory, 2.0, other));
}

TEST_CASE("generate with w = 0 equals a conditional-only sampler") {
  DreamRecModel<float> model(small_config(), 2);
  const Schedule s = Schedule::linear(25);
  const Rng start = Rng::stream(5, StreamPurpose::kGenerate, 0, 3);
  Rng rng = start;
  CHECK(generate(model, s, kHistory, 0.0, rng) == conditional_only(model, s, kHistory, start));
}

TEST_CASE("coinciding branches make any w equal to w = 0") {
  DreamRecModel<float> model(small_config(), 3);
  const Schedule s = Schedule::linear(15);
  model.encoder().dummy_parameter().value = model.encode_history(kHistory);
  const Rng start = Rng::stream(6, StreamPurpose::kGenerate, 0, 0);
  Rng r0 = start;
  const auto base = generate(model, s, kHistory, 0.0, r0);
  for (double w : {2.0, 10.0}) {
    Rng r = start;
    CHECK(generate(model, s, kHistory, w, r) == base);
  }
}

TEST_CASE("single-step generation is the guided prediction at the initial draw") {
  DreamRecModel<float> model(small_config(), 4);
  const Schedule s = Schedule::linear(1);
  const Rng start = Rng::stream(7, StreamPurpose::kGenerate, 0, 0);
  Rng draw = start;
  Tensor<float> x({8});
  for (auto& v : x.values()) v = static_cast<float>(draw.normal());
  const auto c = model.encode_history(kHistory);
  const auto expected =
      cfg_combine(model.denoise(x, c, 1), model.denoise(x, model.dummy_guidance(), 1), 2.0);
  Rng rng = start;
  CHECK(generate(model, s, kHistory, 2.0, rng) == expected);
}

TEST_CASE("batched generation matches one-at-a-time generation") {
  DreamRecModel<float> model(small_config(), 5);
  const Schedule s = Schedule::linear(12);
  std::vector<Rng> streams;
  for (std::uint64_t i = 0; i < 4; ++i) {
    streams.push_back(Rng::stream(1, StreamPurpose::kGenerate, 0, i));
  }
  std::vector<Rng> copy = streams;
  const auto batch = generate_batch(model, s, kBatchHistories, 2.0, streams);
  for (std::size_t b = 0; b < 4; ++b) {
    const std::span<const ItemIndex> h(kBatchHistories.data() + 4 * b, 4);
    const auto single = generate(model, s, h, 2.0, copy[b]);
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(batch[b * 8 + j] == doctest::Approx(single[j]).epsilon(1e-5));
    }
  }
}

TEST_CASE("training loss is bit-reproducible for a fixed batch") {
  const Schedule s = Schedule::linear(100);
  const DiffusionConfig dc;
  auto loss = [&] {
    DreamRecModel<float> model(small_config(), 0);
    const auto draws = batch_draws(2, 100, 0.1);
    Graph<float> g;
    const std::vector<ItemIndex> h(kBatchHistories.begin(), kBatchHistories.begin() + 8);
    const std::vector<ItemIndex> t(kBatchTargets.begin(), kBatchTargets.begin() + 2);
    return g.value(training_loss(g, model, s, dc, h, t, draws).loss).item();
  };
  const float first = loss();
  CHECK(std::isfinite(first));
  CHECK(first > 0.0f);
  CHECK(loss() == first);
}

TEST_CASE("training loss is zero for a perfect prediction") {
  DreamRecModel<double> model(small_config(), 0);
  auto& params = model.parameters();
  params.at("denoiser.out.weight").value.fill(0.0);
  auto& bias = params.at("denoiser.out.bias").value;
  auto& table = model.items().weights().value;
  for (std::size_t j = 0; j < 8; ++j) table[5 * 8 + j] = bias[j];
  const std::vector<ItemIndex> h = {0, 1, 2, 3};
  const std::vector<ItemIndex> t = {5};
  Graph<double> g;
  const auto draws = batch_draws(1, 10, 0.0);
  const Schedule s = Schedule::linear(10);
  CHECK(g.value(training_loss(g, model, s, DiffusionConfig{}, h, t, draws).loss).item() == 0.0);
}

TEST_CASE("training loss is invariant to batch order") {
  DreamRecModel<float> model(small_config(), 0);
  const Schedule s = Schedule::linear(50);
  const DiffusionConfig dc;
  const auto draws = batch_draws(4, 50, 0.3);
  auto run = [&](const std::vector<std::size_t>& order) {
    std::vector<ItemIndex> h, t;
    std::vector<TrainingDraw> d;
    for (std::size_t i : order) {
      h.insert(h.end(), kBatchHistories.begin() + 4 * i, kBatchHistories.begin() + 4 * i + 4);
      t.push_back(kBatchTargets[i]);
      d.push_back(draws[i]);
    }
    Graph<float> g(num::GradMode::kDisabled);
    const auto terms = training_loss(g, model, s, dc, h, t, d);
    std::vector<float> per(g.value(terms.per_example).values().begin(),
                           g.value(terms.per_example).values().end());
    return std::make_pair(g.value(terms.loss).item(), per);
  };
  const auto [loss_a, per_a] = run({0, 1, 2, 3});
  const auto [loss_b, per_b] = run({2, 0, 3, 1});
  CHECK(per_b[0] == per_a[2]);
  CHECK(per_b[1] == per_a[0]);
  CHECK(per_b[2] == per_a[3]);
  CHECK(per_b[3] == per_a[1]);
  CHECK(loss_b == doctest::Approx(loss_a).epsilon(1e-6));
}

TEST_CASE("training loss touches only target and history embeddings") {
  DreamRecModel<float> model(small_config(), 0);
  const Schedule s = Schedule::linear(50);
  const auto draws = batch_draws(4, 50, 0.0);
  Graph<float> g;
  const auto terms =
      training_loss(g, model, s, DiffusionConfig{}, kBatchHistories, kBatchTargets, draws);
  g.backward(terms.loss);
  std::set<ItemIndex> used(kBatchHistories.begin(), kBatchHistories.end());
  used.insert(kBatchTargets.begin(), kBatchTargets.end());
  used.erase(kPaddingItem);
  const auto& grad = model.items().weights().grad;
  for (ItemIndex i = 0; i <= 15; ++i) {
    bool nonzero = false;
    for (std::size_t j = 0; j < 8; ++j) nonzero = nonzero || grad[i * 8 + j] != 0.0f;
    CAPTURE(i);
    if (!used.count(i)) CHECK_FALSE(nonzero);
  }
}

TEST_CASE("training draws follow the unconditional probability") {
  for (auto& d : batch_draws(50, 10, 1.0)) CHECK(d.unconditional);
  for (auto& d : batch_draws(50, 10, 0.0)) {
    CHECK_FALSE(d.unconditional);
    CHECK(d.step >= 1);
    CHECK(d.step <= 10);
    CHECK(d.noise.size() == 8);
  }
  DreamRecModel<float> model(small_config(), 0);
  Graph<float> g;
  CHECK_THROWS_AS(training_loss(g, model, Schedule::linear(10), DiffusionConfig{}, {}, {}, {}),
                  ContractError);
}

TEST_CASE("loss weights") {
  const Schedule s = Schedule::linear(2, 0.1, 0.2);
  CHECK(loss_weight(LossWeighting::kSimple, 2, s) == 1.0);
  CHECK(loss_weight(LossWeighting::kVariational, 2, s) ==
        doctest::Approx(6.299999999999999).epsilon(1e-14));
  CHECK(loss_weight(LossWeighting::kVariational, 1, s) ==
        doctest::Approx(1.0 / (2.0 * s.beta_tilde(2))).epsilon(1e-14));
  const Schedule one = Schedule::linear(1, 0.3, 0.3);
  CHECK(loss_weight(LossWeighting::kVariational, 1, one) == doctest::Approx(1.0 / 0.6));
}

TEST_CASE("noise and target parameterizations give the same posterior mean") {
  const Schedule s = Schedule::linear(1000);
  Rng rng = Rng::stream(9, StreamPurpose::kTest, 0, 0);
  double worst64 = 0.0, worst32 = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int t = 1 + static_cast<int>(rng.below(1000));
    Tensor<double> x0({4}), eps({4}), x0_hat({4});
    for (std::size_t j = 0; j < 4; ++j) {
      x0[j] = rng.normal();
      eps[j] = rng.normal();
      x0_hat[j] = rng.normal();
    }
    const auto xt = q_sample(x0, t, eps, s);
    const auto eps_hat = implied_noise(xt, x0_hat, t, s);
    const auto via_noise = mean_from_noise(xt, eps_hat, t, s);
    const auto via_target = mean_from_target(x0_hat, eps_hat, t, s);
    const auto exact = posterior_mean(x0, xt, t, s);
    const auto exact_route = mean_from_noise(xt, implied_noise(xt, x0, t, s), t, s);

    const auto xt32 = xt.cast<float>();
    const auto x0_hat32 = x0_hat.cast<float>();
    const auto eps_hat32 = implied_noise(xt32, x0_hat32, t, s);
    const auto n32 = mean_from_noise(xt32, eps_hat32, t, s);
    const auto m32 = mean_from_target(x0_hat32, eps_hat32, t, s);
    for (std::size_t j = 0; j < 4; ++j) {
      const double scale = std::max(std::abs(via_target[j]), 1e-12);
      worst64 = std::max(worst64, std::abs(via_noise[j] - via_target[j]) / scale);
      const double exact_scale = std::max(std::abs(exact[j]), 1e-12);
      worst64 = std::max(worst64, std::abs(exact_route[j] - exact[j]) / exact_scale);
      const double scale32 = std::max(std::abs(double(m32[j])), 1e-6);
      worst32 = std::max(worst32, std::abs(double(n32[j]) - m32[j]) / scale32);
    }
  }
  CHECK(worst64 <= 1e-10);
  CHECK(worst32 <= 1e-5);
}
