#include "dreamrec/diffusion.hpp"

#include <cmath>
#include <string>

namespace dreamrec {

using num::Graph;
using num::Tensor;
using num::Var;

void DiffusionConfig::validate() const {
  if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) throw ContractError("p_uncond must lie in [0, 1]");
  if (!(guidance >= 0.0)) throw ContractError("guidance strength w must be >= 0");
}

TrainingDraw draw_training(Rng& rng, std::size_t dim, int steps, double p_uncond) {
  TrainingDraw d;
  d.unconditional = rng.uniform() < p_uncond;
  d.step = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(steps)));
  d.noise.resize(dim);
  for (auto& v : d.noise) v = rng.normal();
  return d;
}

std::vector<TrainingDraw> draw_training_batch(const NoiseKey& key,
                                              std::span<const std::uint64_t> example_ids,
                                              std::size_t dim, int steps, double p_uncond) {
  std::vector<TrainingDraw> out;
  out.reserve(example_ids.size());
  for (std::uint64_t id : example_ids) {
    Rng rng = Rng::stream(key.seed, StreamPurpose::kTrain, key.round, id);
    out.push_back(draw_training(rng, dim, steps, p_uncond));
  }
  return out;
}

double loss_weight(LossWeighting weighting, int t, const Schedule& schedule) {
  schedule.check_step(t);
  if (weighting == LossWeighting::kSimple) return 1.0;
  double var = schedule.beta_tilde(t);
  if (t == 1) var = schedule.steps() >= 2 ? schedule.beta_tilde(2) : schedule.beta(1);
  return schedule.alpha_bar(t - 1) / (2.0 * var);
}

template <typename Real>
LossTerms<Real> training_loss(Graph<Real>& g, const DreamRecModel<Real>& model,
                              const Schedule& schedule, const DiffusionConfig& config,
                              std::span<const ItemIndex> histories,
                              std::span<const ItemIndex> targets,
                              std::span<const TrainingDraw> draws) {
  const std::size_t B = targets.size();
  const std::size_t d = model.config().dim;
  if (B == 0) throw ContractError("training_loss: empty batch");
  if (draws.size() != B || histories.size() != B * model.config().window) {
    throw ContractError("training_loss: batch components disagree in size");
  }
  for (ItemIndex t : targets) {
    if (t == kPaddingItem) throw ContractError("training_loss: padding used as a target");
  }

  // Guidance, with dropped rows redirected to the dummy token.
  Var cond = model.guidance(g, histories);
  const Var candidates[] = {cond, model.encoder().dummy(g)};
  std::vector<std::size_t> rows(B);
  for (std::size_t b = 0; b < B; ++b) rows[b] = draws[b].unconditional ? B : b;
  Var guidance = g.gather_rows(g.concat(candidates, 0), std::move(rows));

  // e_t = sqrt(abar_t) e0 + sqrt(1 - abar_t) eps, row by row.
  Var target = model.items().lookup(g, targets);
  Tensor<Real> signal({B, d});
  Tensor<Real> noise({B, d});
  Tensor<Real> weights({B});
  std::vector<int> steps(B);
  for (std::size_t b = 0; b < B; ++b) {
    const TrainingDraw& dr = draws[b];
    schedule.check_step(dr.step);
    if (dr.noise.size() != d) throw ContractError("training_loss: noise has wrong dimension");
    steps[b] = dr.step;
    const double abar = schedule.alpha_bar(dr.step);
    const auto s = static_cast<Real>(std::sqrt(abar));
    const auto n = static_cast<Real>(std::sqrt(1.0 - abar));
    for (std::size_t j = 0; j < d; ++j) {
      signal[b * d + j] = s;
      noise[b * d + j] = n * static_cast<Real>(dr.noise[j]);
    }
    weights[b] = static_cast<Real>(loss_weight(config.weighting, dr.step, schedule));
  }
  Var noisy = g.add(g.mul(target, g.constant(std::move(signal))), g.constant(std::move(noise)));

  Var prediction = model.denoiser().predict(g, noisy, guidance, steps);
  Var per_example = g.row_sq_norm(g.sub(target, prediction));
  if (config.weighting != LossWeighting::kSimple) {
    per_example = g.mul(per_example, g.constant(std::move(weights)));
  }
  return {g.mean(per_example), per_example};
}

template <typename Real>
Tensor<Real> cfg_combine(const Tensor<Real>& cond, const Tensor<Real>& uncond, double w) {
  if (cond.shape() != uncond.shape()) throw ContractError("cfg_combine: shape mismatch");
  if (!(w >= 0.0)) throw ContractError("cfg_combine: w must be >= 0");
  const auto weight = static_cast<Real>(w);
  Tensor<Real> out(cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = cond[i] + weight * (cond[i] - uncond[i]);
  return out;
}

namespace {

template <typename Real>
Tensor<Real> as_rows(const Tensor<Real>& t, std::size_t dim) {
  if (t.rank() == 1 && t.extent(0) == dim) return t.reshaped({1, dim});
  if (t.rank() == 2 && t.cols() == dim) return t;
  throw ContractError("expected [dim] or [batch, dim] tensor, got " + num::shape_string(t.shape()));
}

}  // namespace

template <typename Real>
Tensor<Real> p_sample_step(const DreamRecModel<Real>& model, const Schedule& schedule,
                           const Tensor<Real>& xt, int t, const Tensor<Real>& guidance, double w,
                           const Tensor<Real>& z) {
  schedule.check_step(t);
  if (!(w >= 0.0)) throw ContractError("p_sample_step: w must be >= 0");
  const std::size_t d = model.config().dim;
  const Tensor<Real> x = as_rows(xt, d);
  const Tensor<Real> c = as_rows(guidance, d);
  const Tensor<Real> noise = as_rows(z, d);
  if (c.shape() != x.shape() || noise.shape() != x.shape()) {
    throw ContractError("p_sample_step: x_t, guidance and z shapes differ");
  }
  if (t == 1) {
    for (Real v : noise.values()) {
      if (v != Real(0)) throw ContractError("p_sample_step: z must be zero at t = 1");
    }
  }
  const std::size_t B = x.rows();
  const std::vector<int> steps(B, t);

  Graph<Real> g(num::GradMode::kDisabled);
  Var xv = g.constant(x);
  Tensor<Real> guided = g.value(model.denoiser().predict(g, xv, g.constant(c), steps));
  if (w != 0.0) {
    Var phi = g.gather_rows(model.encoder().dummy(g), std::vector<std::size_t>(B, 0));
    const Tensor<Real>& uncond = g.value(model.denoiser().predict(g, xv, phi, steps));
    guided = cfg_combine(guided, uncond, w);
  }

  Tensor<Real> out = posterior_mean(guided, x, t, schedule);
  const auto sigma = static_cast<Real>(std::sqrt(schedule.beta_tilde(t)));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += sigma * noise[i];
  return xt.rank() == 1 ? out.reshaped({d}) : out;
}

template <typename Real>
Tensor<Real> generate_batch(const DreamRecModel<Real>& model, const Schedule& schedule,
                            std::span<const ItemIndex> histories, double w,
                            std::span<Rng> streams) {
  const std::size_t B = streams.size();
  const std::size_t d = model.config().dim;
  if (histories.size() != B * model.config().window) {
    throw ContractError("generate: " + std::to_string(B) + " streams for " +
                        std::to_string(histories.size()) + " history ids");
  }
  Tensor<Real> x({B, d});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < d; ++j) x[b * d + j] = static_cast<Real>(streams[b].normal());
  }
  Tensor<Real> c;
  {
    Graph<Real> g(num::GradMode::kDisabled);
    c = g.value(model.guidance(g, histories));
  }
  Tensor<Real> z({B, d});
  for (int t = schedule.steps(); t >= 1; --t) {
    if (t > 1) {
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t j = 0; j < d; ++j) z[b * d + j] = static_cast<Real>(streams[b].normal());
      }
    } else {
      z.fill(Real(0));
    }
    x = p_sample_step(model, schedule, x, t, c, w, z);
  }
  return x;
}

template <typename Real>
Tensor<Real> generate(const DreamRecModel<Real>& model, const Schedule& schedule,
                      std::span<const ItemIndex> history, double w, Rng& rng) {
  Tensor<Real> out = generate_batch(model, schedule, history, w, std::span<Rng>(&rng, 1));
  return out.reshaped({model.config().dim});
}

template <typename Real>
Tensor<Real> implied_noise(const Tensor<Real>& xt, const Tensor<Real>& x0_hat, int t,
                           const Schedule& schedule) {
  if (xt.shape() != x0_hat.shape()) throw ContractError("implied_noise: shape mismatch");
  const double abar = schedule.alpha_bar(t);
  const double s = std::sqrt(abar), n = std::sqrt(1.0 - abar);
  Tensor<Real> out(xt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<Real>((static_cast<double>(xt[i]) - s * static_cast<double>(x0_hat[i])) / n);
  }
  return out;
}

template <typename Real>
Tensor<Real> mean_from_noise(const Tensor<Real>& xt, const Tensor<Real>& eps_hat, int t,
                             const Schedule& schedule) {
  if (xt.shape() != eps_hat.shape()) throw ContractError("mean_from_noise: shape mismatch");
  const double k = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
  const double inv = 1.0 / std::sqrt(schedule.alpha(t));
  Tensor<Real> out(xt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<Real>(inv * (static_cast<double>(xt[i]) - k * static_cast<double>(eps_hat[i])));
  }
  return out;
}

template <typename Real>
Tensor<Real> mean_from_target(const Tensor<Real>& x0_hat, const Tensor<Real>& eps_hat, int t,
                              const Schedule& schedule) {
  if (x0_hat.shape() != eps_hat.shape()) throw ContractError("mean_from_target: shape mismatch");
  const double abar_prev = schedule.alpha_bar(t - 1);
  const double a = std::sqrt(abar_prev);
  const double b =
      std::sqrt(schedule.alpha(t)) * (1.0 - abar_prev) / std::sqrt(1.0 - schedule.alpha_bar(t));
  Tensor<Real> out(x0_hat.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<Real>(a * static_cast<double>(x0_hat[i]) + b * static_cast<double>(eps_hat[i]));
  }
  return out;
}

#define DREAMREC_INSTANTIATE(Real)                                                               \
  template LossTerms<Real> training_loss(Graph<Real>&, const DreamRecModel<Real>&,               \
                                         const Schedule&, const DiffusionConfig&,                \
                                         std::span<const ItemIndex>, std::span<const ItemIndex>, \
                                         std::span<const TrainingDraw>);                         \
  template Tensor<Real> cfg_combine(const Tensor<Real>&, const Tensor<Real>&, double);           \
  template Tensor<Real> p_sample_step(const DreamRecModel<Real>&, const Schedule&,               \
                                      const Tensor<Real>&, int, const Tensor<Real>&, double,     \
                                      const Tensor<Real>&);                                      \
  template Tensor<Real> generate_batch(const DreamRecModel<Real>&, const Schedule&,              \
                                       std::span<const ItemIndex>, double, std::span<Rng>);      \
  template Tensor<Real> generate(const DreamRecModel<Real>&, const Schedule&,                    \
                                 std::span<const ItemIndex>, double, Rng&);                      \
  template Tensor<Real> implied_noise(const Tensor<Real>&, const Tensor<Real>&, int,             \
                                      const Schedule&);                                          \
  template Tensor<Real> mean_from_noise(const Tensor<Real>&, const Tensor<Real>&, int,           \
                                        const Schedule&);                                        \
  template Tensor<Real> mean_from_target(const Tensor<Real>&, const Tensor<Real>&, int,          \
                                         const Schedule&);

DREAMREC_INSTANTIATE(float)
DREAMREC_INSTANTIATE(double)
#undef DREAMREC_INSTANTIATE

}  // namespace dreamrec
