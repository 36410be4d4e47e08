#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dreamrec/model.hpp"
#include "dreamrec/rng.hpp"
#include "dreamrec/schedule.hpp"

namespace dreamrec {

enum class LossWeighting {
  /// Plain ||e0 - f(e_t, c, t)||^2 per example.
  kSimple,
  /// Variational-bound weight abar_{t-1} / (2 beta_tilde_t). beta_tilde_1 is
  /// zero, so step 1 borrows beta_tilde_2 (beta_1 when T = 1).
  kVariational,
};

struct DiffusionConfig {
  /// Probability of replacing the guidance by the dummy token during training.
  double p_uncond = 0.1;
  /// Guidance strength used at generation time.
  double guidance = 2.0;
  LossWeighting weighting = LossWeighting::kSimple;

  void validate() const;
};

/// Randomness consumed by one training example, drawn from its own stream.
struct TrainingDraw {
  bool unconditional = false;
  int step = 1;
  std::vector<double> noise;
};

/// Identifies a family of per-example streams, e.g. (seed, epoch).
struct NoiseKey {
  std::uint64_t seed = 0;
  std::uint64_t round = 0;
};

/// Draws, in order: the unconditional coin, the step t ~ U{1..T}, then dim
/// standard normals.
TrainingDraw draw_training(Rng& rng, std::size_t dim, int steps, double p_uncond);

std::vector<TrainingDraw> draw_training_batch(const NoiseKey& key,
                                              std::span<const std::uint64_t> example_ids,
                                              std::size_t dim, int steps, double p_uncond);

template <typename Real>
struct LossTerms {
  num::Var loss;         ///< scalar batch mean
  num::Var per_example;  ///< [batch]
};

/// Denoising loss of a batch. `histories` holds batch windows back to back.
/// Only target embeddings and Gaussian noise enter the objective.
template <typename Real>
LossTerms<Real> training_loss(num::Graph<Real>& g, const DreamRecModel<Real>& model,
                              const Schedule& schedule, const DiffusionConfig& config,
                              std::span<const ItemIndex> histories,
                              std::span<const ItemIndex> targets,
                              std::span<const TrainingDraw> draws);

/// (1 + w) cond - w uncond, evaluated as cond + w (cond - uncond) so that
/// w = 0 or cond == uncond return cond bit-for-bit.
template <typename Real>
num::Tensor<Real> cfg_combine(const num::Tensor<Real>& cond, const num::Tensor<Real>& uncond,
                              double w);

/// One guided reverse step for rows of x_t [batch, dim] (or a single [dim]
/// vector): posterior_mean(f~, x_t, t) + sqrt(beta_tilde_t) z. z must be zero
/// at t = 1. The unconditional branch draws no randomness and is skipped
/// when w == 0.
template <typename Real>
num::Tensor<Real> p_sample_step(const DreamRecModel<Real>& model, const Schedule& schedule,
                                const num::Tensor<Real>& xt, int t,
                                const num::Tensor<Real>& guidance, double w,
                                const num::Tensor<Real>& z);

/// Guided ancestral sampling for a batch of windows, one stream per row.
/// Each stream supplies the initial draw e_T and then one z per step t > 1.
/// The encoder runs once per call.
template <typename Real>
num::Tensor<Real> generate_batch(const DreamRecModel<Real>& model, const Schedule& schedule,
                                 std::span<const ItemIndex> histories, double w,
                                 std::span<Rng> streams);

/// Oracle embedding [dim] for one history window.
template <typename Real>
num::Tensor<Real> generate(const DreamRecModel<Real>& model, const Schedule& schedule,
                           std::span<const ItemIndex> history, double w, Rng& rng);

// Mean of p(x_{t-1} | x_t) under the two network parameterizations.

/// Noise implied by a clean-target prediction: (x_t - sqrt(abar_t) x0) / sqrt(1 - abar_t).
template <typename Real>
num::Tensor<Real> implied_noise(const num::Tensor<Real>& xt, const num::Tensor<Real>& x0_hat, int t,
                                const Schedule& schedule);

/// (x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t).
template <typename Real>
num::Tensor<Real> mean_from_noise(const num::Tensor<Real>& xt, const num::Tensor<Real>& eps_hat,
                                  int t, const Schedule& schedule);

/// sqrt(abar_{t-1}) x0 + sqrt(alpha_t) (1 - abar_{t-1}) / sqrt(1 - abar_t) eps.
template <typename Real>
num::Tensor<Real> mean_from_target(const num::Tensor<Real>& x0_hat,
                                   const num::Tensor<Real>& eps_hat, int t,
                                   const Schedule& schedule);

/// Per-step loss weight for the given weighting.
double loss_weight(LossWeighting weighting, int t, const Schedule& schedule);

}  // namespace dreamrec
