#include "dreamrec/optim.hpp"

#include <cmath>
#include <string>

namespace dreamrec::num {

void validate(const AdamWConfig& config) {
  if (!(config.learning_rate >= 0.0)) throw ContractError("AdamW: learning rate must be >= 0");
  if (!(config.beta1 > 0.0 && config.beta1 < 1.0) || !(config.beta2 > 0.0 && config.beta2 < 1.0)) {
    throw ContractError("AdamW: moment decays must lie in (0, 1)");
  }
  if (!(config.epsilon > 0.0)) throw ContractError("AdamW: epsilon must be positive");
  if (!(config.weight_decay >= 0.0)) throw ContractError("AdamW: weight decay must be >= 0");
}

template <typename Real>
AdamWState<Real> AdamWState<Real>::init(std::span<Parameter<Real>* const> params,
                                        const AdamWConfig& config) {
  validate(config);
  AdamWState state;
  state.config = config;
  for (const Parameter<Real>* p : params) {
    state.first_moment.emplace_back(p->value.shape());
    state.second_moment.emplace_back(p->value.shape());
  }
  return state;
}

template <typename Real>
void adamw_step(std::span<Parameter<Real>* const> params, AdamWState<Real>& state) {
  if (params.size() != state.first_moment.size() || params.size() != state.second_moment.size()) {
    throw ContractError("AdamW: state tracks " + std::to_string(state.first_moment.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& s = params[i]->value.shape();
    if (state.first_moment[i].shape() != s || state.second_moment[i].shape() != s ||
        params[i]->grad.shape() != s) {
      throw ContractError("AdamW: shape mismatch for parameter '" + params[i]->name + "'");
    }
  }

  const AdamWConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  const double decay = 1.0 - c.learning_rate * c.weight_decay;
  const double step_size = c.learning_rate / bias1;
  const double sqrt_bias2 = std::sqrt(bias2);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Real* value = params[i]->value.data();
    const Real* grad = params[i]->grad.data();
    Real* m = state.first_moment[i].data();
    Real* v = state.second_moment[i].data();
    const std::size_t n = params[i]->value.size();
    for (std::size_t j = 0; j < n; ++j) {
      const double g = grad[j];
      const double mj = c.beta1 * static_cast<double>(m[j]) + (1.0 - c.beta1) * g;
      const double vj = c.beta2 * static_cast<double>(v[j]) + (1.0 - c.beta2) * g * g;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      double p = static_cast<double>(value[j]);
      if (c.weight_decay != 0.0) p *= decay;
      p -= step_size * mj / (std::sqrt(vj) / sqrt_bias2 + c.epsilon);
      value[j] = static_cast<Real>(p);
    }
  }
}

template struct AdamWState<float>;
template struct AdamWState<double>;
template void adamw_step<float>(std::span<Parameter<float>* const>, AdamWState<float>&);
template void adamw_step<double>(std::span<Parameter<double>* const>, AdamWState<double>&);

}  // namespace dreamrec::num
