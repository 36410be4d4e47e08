#pragma once

#include <span>
#include <vector>

#include "dreamrec/tensor.hpp"

namespace dreamrec {

/// Precomputed variance schedule for a T-step diffusion, stored in 64-bit.
/// Step indices are 1-based; alpha_bar(0) is 1 by definition.
class Schedule {
 public:
  /// beta_t linearly spaced from beta_start (t = 1) to beta_end (t = T).
  static Schedule linear(int steps, double beta_start = 1e-4, double beta_end = 0.02);

  int steps() const noexcept { return steps_; }

  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return 1.0 - beta_[index(t)]; }
  double alpha_bar(int t) const;
  /// Posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t. Zero at t = 1.
  double beta_tilde(int t) const { return beta_tilde_[index(t)]; }

  /// Posterior mean coefficients: mean = coef_x0 * x0 + coef_xt * xt.
  double coef_x0(int t) const { return coef_x0_[index(t)]; }
  double coef_xt(int t) const { return coef_xt_[index(t)]; }

  std::span<const double> betas() const noexcept { return beta_; }
  std::span<const double> alpha_bars() const noexcept { return alpha_bar_; }
  std::span<const double> beta_tildes() const noexcept { return beta_tilde_; }

  void check_step(int t) const;

 private:
  std::size_t index(int t) const {
    check_step(t);
    return static_cast<std::size_t>(t - 1);
  }

  int steps_ = 0;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
  std::vector<double> beta_tilde_;
  std::vector<double> coef_x0_;
  std::vector<double> coef_xt_;
};

/// Serializable schedule parameters.
struct ScheduleConfig {
  int steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  Schedule build() const { return Schedule::linear(steps, beta_start, beta_end); }
};

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <typename Real>
num::Tensor<Real> q_sample(const num::Tensor<Real>& x0, int t, const num::Tensor<Real>& eps,
                           const Schedule& schedule);

/// Mean of q(x_{t-1} | x_t, x_0).
template <typename Real>
num::Tensor<Real> posterior_mean(const num::Tensor<Real>& x0, const num::Tensor<Real>& xt, int t,
                                 const Schedule& schedule);

}  // namespace dreamrec
