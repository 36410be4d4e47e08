// Acceptance run: one PASS/FAIL line per criterion, exit status 1 on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "brute_force.hpp"
#include "dreamrec/baseline.hpp"
#include "dreamrec/cli.hpp"
#include "dreamrec/gradcheck.hpp"
#include "dreamrec/training.hpp"
#include "support.hpp"

using namespace dreamrec;
using num::Graph;
using num::Tensor;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

double rel(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

using Clock = std::chrono::steady_clock;

double since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// ---------------------------------------------------------------------------

Verdict schedule_closure() {
  Verdict v;
  double worst = 0.0;
  bool first_zero = true;
  for (int T : {50, 100, 200, 500, 1000, 2000}) {
    const Schedule s = Schedule::linear(T);
    const double b1 = 1e-4, bT = 0.02;
    double prev_bar = 1.0;
    for (int t = 1; t <= T; ++t) {
      const double beta = b1 + (bT - b1) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
      const double bar = prev_bar * (1.0 - beta);
      const double tilde = (1.0 - prev_bar) / (1.0 - bar) * beta;
      worst = std::max({worst, rel(s.beta(t), beta), rel(s.alpha_bar(t), bar)});
      if (t > 1) worst = std::max(worst, rel(s.beta_tilde(t), tilde));
      prev_bar = bar;
    }
    first_zero = first_zero && s.beta_tilde(1) == 0.0;
  }
  v.require(worst <= 1e-12, "closure error " + fmt("%.3g", worst));
  v.require(first_zero, "beta_tilde(1) is not exactly 0");
  v.note("max relative error " + fmt("%.3g", worst));
  return v;
}

Verdict parameterization_equivalence() {
  Verdict v;
  const Schedule s = Schedule::linear(1000);
  Rng rng = Rng::stream(0, StreamPurpose::kTest, 100, 0);
  constexpr int kDraws = 2000;
  double worst = 0.0;
  for (int i = 0; i < kDraws; ++i) {
    const int t = 1 + static_cast<int>(rng.below(1000));
    Tensor<double> x0({8}), eps({8}), x0_hat({8});
    for (std::size_t j = 0; j < 8; ++j) {
      x0[j] = rng.normal();
      eps[j] = rng.normal();
      x0_hat[j] = rng.normal();
    }
    const auto xt = q_sample(x0, t, eps, s);
    const auto eps_hat = implied_noise(xt, x0_hat, t, s);
    const auto via_noise = mean_from_noise(xt, eps_hat, t, s);
    const auto via_target = mean_from_target(x0_hat, eps_hat, t, s);
    const auto direct = posterior_mean(x0_hat, xt, t, s);
    for (std::size_t j = 0; j < 8; ++j) {
      worst = std::max({worst, rel(via_noise[j], via_target[j]), rel(via_noise[j], direct[j])});
    }
  }
  v.require(worst <= 1e-10, "relative error " + fmt("%.3g", worst));
  v.note(std::to_string(kDraws) + " draws, max relative error " + fmt("%.3g", worst));
  return v;
}

struct LossFixture {
  ModelConfig config;
  Schedule schedule = Schedule::linear(100);
  DiffusionConfig diffusion;
  std::vector<ItemIndex> histories;
  std::vector<ItemIndex> targets = {4, 17};
  std::vector<TrainingDraw> draws;

  LossFixture() {
    config.num_items = 20;
    config.dim = 16;
    config.window = 6;
    histories = {0, 0, 3, 9, 12, 1, 5, 5, 8, 20, 2, 11};
    const std::vector<std::uint64_t> ids = {0, 1};
    draws = draw_training_batch({0, 0}, ids, config.dim, 100, 0.0);
    // One example per branch so the dummy token is covered as well.
    draws[1].unconditional = true;
  }

  template <typename Real>
  num::Var loss(Graph<Real>& g, const DreamRecModel<Real>& m) const {
    return training_loss(g, m, schedule, diffusion, histories, targets, draws).loss;
  }
};

Verdict gradient_integrity() {
  Verdict v;
  const LossFixture f;
  num::GradCheckOptions options;
  options.floor = 1e-4;
  options.coordinates_per_parameter = 8;

  DreamRecModel<double> m64(f.config, 0);
  options.step = 1e-4;
  const auto r64 = num::grad_check<double>(
      [&](Graph<double>& g) { return f.loss(g, m64); }, m64.parameters().all(), options);

  DreamRecModel<float> m32(f.config, 0);
  DreamRecModel<double> ref(f.config, 0);
  options.step = 1e-3;
  const auto r32 = num::grad_check<float>(
      [&](Graph<float>& g) { return f.loss(g, m32); }, m32.parameters().all(), options, [&] {
        num::copy_parameter_values(ref.parameters(), m32.parameters());
        Graph<double> g(num::GradMode::kDisabled);
        return g.value(f.loss(g, ref)).item();
      });

  v.require(r64.coordinates_checked >= 50, "64-bit probed too few coordinates");
  v.require(r32.coordinates_checked >= 50, "32-bit probed too few coordinates");
  v.require(r64.max_rel_error <= 1e-6, "64-bit error " + fmt("%.3g", r64.max_rel_error));
  v.require(r32.max_rel_error <= 1e-3, "32-bit error " + fmt("%.3g", r32.max_rel_error));
  v.note("64-bit " + fmt("%.3g", r64.max_rel_error) + " over " +
         std::to_string(r64.coordinates_checked) + " coords, 32-bit " +
         fmt("%.3g", r32.max_rel_error) + " over " + std::to_string(r32.coordinates_checked));
  return v;
}

Verdict sampler_algebra() {
  Verdict v;
  ModelConfig mc;
  mc.num_items = 15;
  mc.dim = 8;
  mc.window = 4;
  const DreamRecModel<float> model(mc, 3);
  const Schedule s = Schedule::linear(25);
  const std::vector<ItemIndex> history = {0, 3, 9, 2};

  // Conditional-only reference: never touches the dummy branch.
  const Rng start = Rng::stream(0, StreamPurpose::kGenerate, 0, 0);
  Rng rng = start;
  Tensor<float> x({8});
  for (auto& e : x.values()) e = static_cast<float>(rng.normal());
  const auto c = model.encode_history(history);
  for (int t = s.steps(); t >= 1; --t) {
    Tensor<float> out = posterior_mean(model.denoise(x, c, t), x, t, s);
    if (t > 1) {
      const auto sigma = static_cast<float>(std::sqrt(s.beta_tilde(t)));
      for (std::size_t j = 0; j < 8; ++j) out[j] += sigma * static_cast<float>(rng.normal());
    }
    x = out;
  }
  Rng again = start;
  v.require(generate(model, s, history, 0.0, again) == x, "generate(w=0) differs");

  Rng draw = Rng::stream(1, StreamPurpose::kTest, 0, 0);
  Tensor<float> xt({8});
  for (auto& e : xt.values()) e = static_cast<float>(draw.normal());
  for (double w : {0.0, 2.0, 6.0}) {
    const auto expected =
        cfg_combine(model.denoise(xt, c, 1), model.denoise(xt, model.dummy_guidance(), 1), w);
    v.require(p_sample_step(model, s, xt, 1, c, w, Tensor<float>({8})) == expected,
              "p_sample_step at t=1, w=" + fmt("%g", w));
  }

  const Tensor<float> a = model.denoise(xt, c, 5);
  const Tensor<float> b = model.denoise(xt, model.dummy_guidance(), 5);
  v.require(cfg_combine(a, b, 0.0) == a, "w = 0 identity");
  bool equal_branches = true;
  for (double w : {0.5, 2.0, 10.0}) equal_branches = equal_branches && cfg_combine(a, a, w) == a;
  v.require(equal_branches, "cond = uncond identity");
  v.require(cfg_combine(Tensor<float>({1}, {1.0f}), Tensor<float>({1}, {0.0f}), 2.0)[0] == 3.0f,
            "scalar substitution");
  v.note("w=0 sampler bit-identical, t=1 step exact, combine identities hold");
  return v;
}

SequenceDataset synthetic_dataset() {
  SyntheticSpec spec;
  spec.num_items = 100;
  spec.num_sequences = 500;
  spec.sequence_length = 11;
  spec.noise = 0.1;
  spec.seed = 0;
  return synth_generate(spec);
}

Verdict synthetic_end_to_end(const SequenceDataset& data, std::unique_ptr<Model>& trained) {
  Verdict v;
  TrainConfig c;
  c.seed = 0;
  c.epochs = 10;
  c.model.dim = 64;
  c.schedule.steps = 100;
  c.learning_rate = 1e-3;
  c.eval_k = 10;
  auto result = train(data, c);
  EvalOptions o;
  o.k = 10;
  o.w = c.diffusion.guidance;
  o.seed = 0;
  const auto test = evaluate(*result.model, c.schedule.build(), data.test, o);
  const std::size_t examples = data.train.size() + data.validation.size() + data.test.size();
  v.require(examples == 5000, std::to_string(examples) + " examples instead of 5000");
  v.require(test.hr >= 0.5, "test HR@10 " + fmt("%.4f", test.hr));
  v.note("test HR@10 " + fmt("%.4f", test.hr) + ", NDCG@10 " + fmt("%.4f", test.ndcg) +
         ", best epoch " + std::to_string(result.report.best_epoch) + " of " +
         std::to_string(c.epochs));
  trained = std::move(result.model);
  return v;
}

Verdict paradigm_contrast(const SequenceDataset& data) {
  Verdict v;
  // Hard invariant: without negatives, an item that is neither a target nor
  // in a history gets exactly zero gradient.
  ModelConfig mc;
  mc.num_items = data.num_items();
  mc.dim = 64;
  mc.window = data.window;
  ClassifierModel model(mc, 0);
  const std::span<const SequenceExample> batch(data.train.data(), 128);
  std::vector<ItemIndex> targets;
  for (const auto& e : batch) targets.push_back(e.target);
  const auto histories = flatten_histories(batch);
  const std::vector<ItemIndex> empty(batch.size() * data.window, kPaddingItem);

  // Returns the number of rows checked, or -1 on the first nonzero one.
  auto untouched_rows_zero = [&](const std::vector<ItemIndex>& h, std::set<ItemIndex> used) {
    model.parameters().zero_grad();
    Graph<float> g;
    g.backward(bce_loss(g, model, h, targets, {}));
    used.insert(targets.begin(), targets.end());
    const auto& grad = model.items().weights().grad;
    long checked = 0;
    for (ItemIndex i = 1; i <= mc.num_items; ++i) {
      if (used.count(i)) continue;
      for (std::size_t j = 0; j < mc.dim; ++j) {
        if (grad[i * mc.dim + j] != 0.0f) return -1L;
      }
      ++checked;
    }
    return checked;
  };
  const long a = untouched_rows_zero(empty, {});
  const long b = untouched_rows_zero(histories, {histories.begin(), histories.end()});
  v.require(a >= 0, "non-target rows got gradient with empty histories");
  v.require(b >= 0, "non-target, non-history rows got gradient");
  v.note("zero gradient on " + std::to_string(a) + " non-target rows");

  std::vector<double> with, without;
  for (std::uint64_t seed : {0, 1, 2}) {
    BaselineConfig c;
    c.seed = seed;
    c.epochs = 10;
    c.model.dim = 64;
    c.eval_k = 10;
    c.use_negatives = true;
    with.push_back(evaluate_classifier(*train_classifier(data, c).model, data.test, 10).hr);
    c.use_negatives = false;
    without.push_back(evaluate_classifier(*train_classifier(data, c).model, data.test, 10).hr);
  }
  int ordered = 0;
  std::string rows;
  for (std::size_t i = 0; i < 3; ++i) {
    ordered += without[i] <= with[i] ? 1 : 0;
    rows += " seed " + std::to_string(i) + ": " + fmt("%.4f", without[i]) + " vs " +
            fmt("%.4f", with[i]);
  }
  v.note("HR@10 without vs with negatives:" + rows + "; ordering holds for " +
         std::to_string(ordered) + "/3 seeds (reported)");
  return v;
}

Verdict guidance_ablation(const SequenceDataset& data, const Model& model) {
  Verdict v;
  EvalOptions o;
  o.k = 10;
  o.seed = 0;
  const std::vector<double> grid = {0, 2, 4, 6, 8, 10};
  const auto reports = ablate_w(model, Schedule::linear(100), data.test, grid, o);
  const std::string csv = metrics_csv(reports);
  std::istringstream lines(csv);
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(lines, line)) rows.push_back(line);
  v.require(rows.size() == 7, std::to_string(rows.size()) + " CSV lines");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    v.require(std::count(rows[i].begin(), rows[i].end(), ',') == 5, "row " + std::to_string(i));
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < reports.size(); ++i) {
    if (reports[i].hr > reports[best].hr) best = i;
  }
  const bool rise_fall = best > 0 && best + 1 < reports.size();
  std::string shape = "HR@10 by w:";
  for (const auto& r : reports) shape += " " + fmt("%g", r.w) + "=" + fmt("%.4f", r.hr);
  v.note(shape + "; peak at w=" + fmt("%g", grid[best]) +
         (rise_fall ? ", rise-then-fall" : ", no interior peak") + " (reported)");
  return v;
}

Verdict determinism() {
  Verdict v;
  testing::TempDir a("accept"), b("accept");
  auto cli_run = [](std::vector<std::string> args) {
    std::ostringstream out, err;
    return cli::run(args, out, err);
  };
  for (const auto* dir : {&a, &b}) {
    const std::string o = dir->path().string();
    v.require(cli_run({"prepare", "--synthetic", "--seed", "0", "--num-items", "30",
                       "--num-sequences", "80", "-o", o}) == 0, "prepare");
    v.require(cli_run({"train", "--seed", "0", "--steps", "50", "--epochs", "2", "--dim", "16",
                       "--batch-size", "64", "-k", "10", "-o", o}) == 0, "train");
    v.require(cli_run({"eval", "--seed", "0", "--steps", "50", "--dim", "16", "-o", o}) == 0,
              "eval");
  }
  for (const char* f : {"dataset.json", "train_report.csv", "checkpoints/best.ckpt",
                        "checkpoints/last.ckpt", "eval_test.csv"}) {
    v.require(fs::exists(a / f) && testing::read_bytes(a / f) == testing::read_bytes(b / f),
              std::string(f) + " differs between reruns");
  }

  for (const char* f : {"checkpoints/best.ckpt", "checkpoints/last.ckpt"}) {
    auto once = load_checkpoint(a / f);
    save_checkpoint(a / "x1.ckpt", *once.model, once.optimizer ? &*once.optimizer : nullptr,
                    once.schedule, once.diffusion);
    auto twice = load_checkpoint(a / "x1.ckpt");
    save_checkpoint(a / "x2.ckpt", *twice.model, twice.optimizer ? &*twice.optimizer : nullptr,
                    twice.schedule, twice.diffusion);
    v.require(testing::read_bytes(a / "x1.ckpt") == testing::read_bytes(a / "x2.ckpt"),
              std::string("save-load-save of ") + f);
  }

  const SequenceDataset data = load_dataset(a / "dataset.json");
  TrainConfig c;
  c.seed = 0;
  c.epochs = 3;
  c.batch_size = 64;
  c.model.dim = 16;
  c.schedule.steps = 50;
  c.eval_k = 10;
  const auto straight = train(data, c);
  c.checkpoint_dir = a / "resume";
  TrainHooks hooks;
  hooks.stop_after = 1;
  train(data, c, std::nullopt, hooks);
  const auto resumed = train(data, c, c.checkpoint_dir / "last.ckpt");
  bool same = resumed.report.csv() == straight.report.csv();
  const auto& pa = resumed.model->parameters().all();
  const auto& pb = straight.model->parameters().all();
  for (std::size_t i = 0; i < pa.size(); ++i) same = same && pa[i]->value == pb[i]->value;
  v.require(same, "resumed training differs from uninterrupted training");
  v.note("prepare/train/eval byte-identical, checkpoints stable, resume exact");
  return v;
}

Verdict metric_correctness() {
  Verdict v;
  std::size_t total = 0;
  for (std::size_t n = 1; n <= 8; ++n) {
    std::size_t cases = 0;
    const std::size_t failures = testing::exhaustive_metric_check(n, &cases);
    v.require(failures == 0, std::to_string(failures) + " mismatches at |I|=" + std::to_string(n));
    total += cases;
  }
  v.require(std::abs(ndcg_at_k(1, 20) - 1.0) <= 1e-12, "NDCG at rank 1");
  v.require(std::abs(ndcg_at_k(2, 20) - 1.0 / std::log2(3.0)) <= 1e-12, "NDCG at rank 2");
  v.note(std::to_string(total) + " brute-force cases");
  return v;
}

}  // namespace

int main() {
  bool all = true;
  auto report = [&](int id, const char* name, double budget, const std::function<Verdict()>& fn) {
    const auto start = Clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    const double seconds = since(start);
    if (budget > 0.0) v.require(seconds < budget, "runtime over " + fmt("%g", budget) + " s");
    all = all && v.pass;
    std::printf("[%s] %d %s (%.1f s): %s\n", v.pass ? "PASS" : "FAIL", id, name, seconds,
                v.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "schedule closure", 1.0, schedule_closure);
  report(2, "parameterization equivalence", 10.0, parameterization_equivalence);
  report(3, "gradient integrity", 120.0, gradient_integrity);
  report(4, "sampler algebra", 1.0, sampler_algebra);

  const SequenceDataset data = synthetic_dataset();
  std::unique_ptr<Model> trained;
  report(5, "synthetic end-to-end", 900.0, [&] { return synthetic_end_to_end(data, trained); });
  report(6, "paradigm contrast", 0.0, [&] { return paradigm_contrast(data); });
  report(7, "guidance ablation", 0.0, [&] {
    if (!trained) {
      Verdict v;
      v.require(false, "no trained model from criterion 5");
      return v;
    }
    return guidance_ablation(data, *trained);
  });
  report(8, "determinism", 0.0, determinism);
  report(9, "metric correctness", 0.0, metric_correctness);

  std::printf("%s\n", all ? "ALL PASS" : "SOME CRITERIA FAILED");
  return all ? 0 : 1;
}
