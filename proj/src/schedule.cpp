#include "dreamrec/schedule.hpp"

#include <cmath>
#include <string>

namespace dreamrec {

Schedule Schedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ContractError("schedule: T must be >= 1, got " + std::to_string(steps));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ContractError("schedule: need 0 < beta_start <= beta_end < 1");
  }
  Schedule s;
  s.steps_ = steps;
  const auto n = static_cast<std::size_t>(steps);
  s.beta_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.beta_[i] = steps == 1 ? beta_start
                            : beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                               static_cast<double>(steps - 1);
  }
  if (steps > 1) s.beta_.back() = beta_end;

  s.alpha_bar_.resize(n);
  double running = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    running *= 1.0 - s.beta_[i];
    s.alpha_bar_[i] = running;
  }

  s.beta_tilde_.resize(n);
  s.coef_x0_.resize(n);
  s.coef_xt_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double abar = s.alpha_bar_[i];
    const double abar_prev = i == 0 ? 1.0 : s.alpha_bar_[i - 1];
    const double beta = s.beta_[i];
    s.beta_tilde_[i] = (1.0 - abar_prev) / (1.0 - abar) * beta;
    s.coef_x0_[i] = std::sqrt(abar_prev) * beta / (1.0 - abar);
    s.coef_xt_[i] = std::sqrt(1.0 - beta) * (1.0 - abar_prev) / (1.0 - abar);
  }
  // At t = 1 the posterior collapses onto x0 (abar_0 = 1); pin the x0
  // coefficient so rounding of 1 - (1 - beta_1) cannot perturb it.
  s.coef_x0_[0] = 1.0;
  return s;
}

double Schedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  return alpha_bar_[index(t)];
}

void Schedule::check_step(int t) const {
  if (t < 1 || t > steps_) {
    throw ContractError("diffusion step " + std::to_string(t) + " outside [1, " +
                        std::to_string(steps_) + "]");
  }
}

template <typename Real>
num::Tensor<Real> q_sample(const num::Tensor<Real>& x0, int t, const num::Tensor<Real>& eps,
                           const Schedule& schedule) {
  schedule.check_step(t);
  if (x0.shape() != eps.shape()) throw ContractError("q_sample: x0 and eps shapes differ");
  const auto signal = static_cast<Real>(std::sqrt(schedule.alpha_bar(t)));
  const auto noise = static_cast<Real>(std::sqrt(1.0 - schedule.alpha_bar(t)));
  num::Tensor<Real> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = signal * x0[i] + noise * eps[i];
  return out;
}

template <typename Real>
num::Tensor<Real> posterior_mean(const num::Tensor<Real>& x0, const num::Tensor<Real>& xt, int t,
                                 const Schedule& schedule) {
  schedule.check_step(t);
  if (x0.shape() != xt.shape()) throw ContractError("posterior_mean: x0 and xt shapes differ");
  const auto a = static_cast<Real>(schedule.coef_x0(t));
  const auto b = static_cast<Real>(schedule.coef_xt(t));
  num::Tensor<Real> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * xt[i];
  return out;
}

template num::Tensor<float> q_sample(const num::Tensor<float>&, int, const num::Tensor<float>&,
                                     const Schedule&);
template num::Tensor<double> q_sample(const num::Tensor<double>&, int, const num::Tensor<double>&,
                                      const Schedule&);
template num::Tensor<float> posterior_mean(const num::Tensor<float>&, const num::Tensor<float>&,
                                           int, const Schedule&);
template num::Tensor<double> posterior_mean(const num::Tensor<double>&, const num::Tensor<double>&,
                                            int, const Schedule&);

}  // namespace dreamrec
