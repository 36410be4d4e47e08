#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dreamrec/tensor.hpp"

namespace dreamrec::num {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

/// Moment accumulators for AdamW, one pair per parameter in parameter order.
template <typename Real>
struct AdamWState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::vector<Tensor<Real>> first_moment;
  std::vector<Tensor<Real>> second_moment;

  static AdamWState init(std::span<Parameter<Real>* const> params, const AdamWConfig& config);
};

/// One decoupled-weight-decay Adam update:
///   p <- p * (1 - lr * wd)
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// Gradients are left untouched.
template <typename Real>
void adamw_step(std::span<Parameter<Real>* const> params, AdamWState<Real>& state);

void validate(const AdamWConfig& config);

extern template struct AdamWState<float>;
extern template struct AdamWState<double>;

}  // namespace dreamrec::num
