#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dreamrec/autodiff.hpp"

namespace dreamrec::num {

struct GradCheckOptions {
  double step = 1e-4;
  /// Coordinates probed per parameter; 0 probes every coordinate.
  std::size_t coordinates_per_parameter = 0;
  std::uint64_t seed = 0;
  /// Lower bound on the error denominator. Coordinates whose true gradient
  /// is zero (e.g. attention key biases) otherwise score round-off as 100%.
  double floor = 0.0;
};

struct GradCheckEntry {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  /// Worst coordinate of every parameter, sorted by descending error.
  std::vector<GradCheckEntry> worst;
  std::size_t coordinates_checked = 0;
  double max_rel_error = 0.0;
};

/// |a - n| / max(|a|, |n|, floor), with 0/0 defined as 0.
double relative_error(double analytic, double numeric, double floor = 0.0);

/// Builds a loss inside the given graph. Must be deterministic given the
/// current parameter values.
template <typename Real>
using LossBuilder = std::function<Var(Graph<Real>&)>;

/// Compares reverse-mode gradients of `build` against central differences
/// (loss(p + h) - loss(p - h)) / (2h).
///
/// `reference_loss`, if given, evaluates the same loss at the current
/// parameter values in 64-bit and is used for the finite differences; this is
/// how 32-bit gradients are checked against a 64-bit oracle. Otherwise the
/// differences are taken with `build` itself.
///
/// Parameter gradients are overwritten. Throws DeterminismError if the loss
/// changes between two evaluations at the same point.
template <typename Real>
GradCheckReport grad_check(const LossBuilder<Real>& build,
                           std::span<Parameter<Real>* const> params,
                           const GradCheckOptions& options,
                           const std::function<double()>& reference_loss = {});

}  // namespace dreamrec::num
