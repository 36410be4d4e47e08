#include "dreamrec/gradcheck.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "dreamrec/rng.hpp"

namespace dreamrec::num {

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  if (scale == 0.0) return 0.0;
  return std::abs(analytic - numeric) / scale;
}

template <typename Real>
GradCheckReport grad_check(const LossBuilder<Real>& build,
                           std::span<Parameter<Real>* const> params,
                           const GradCheckOptions& options,
                           const std::function<double()>& reference_loss) {
  if (!(options.step > 0.0)) throw ContractError("grad_check: step must be positive");

  auto evaluate = [&]() -> double {
    if (reference_loss) return reference_loss();
    Graph<Real> g(GradMode::kDisabled);
    return static_cast<double>(g.value(build(g)).item());
  };

  for (Parameter<Real>* p : params) p->zero_grad();
  {
    Graph<Real> g;
    g.backward(build(g));
  }

  const double base_a = evaluate();
  const double base_b = evaluate();
  if (std::bit_cast<std::uint64_t>(base_a) != std::bit_cast<std::uint64_t>(base_b)) {
    throw DeterminismError("grad_check: loss changed between identical evaluations");
  }

  GradCheckReport report;
  Rng rng = Rng::stream(options.seed, StreamPurpose::kGradCheck, 0, 0);
  for (Parameter<Real>* p : params) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.coordinates_per_parameter > 0 && options.coordinates_per_parameter < n) {
      // Partial Fisher-Yates: the first k slots become a uniform sample.
      for (std::size_t i = 0; i < options.coordinates_per_parameter; ++i) {
        std::swap(coords[i], coords[i + rng.below(n - i)]);
      }
      coords.resize(options.coordinates_per_parameter);
    }

    GradCheckEntry worst{p->name, 0, 0.0, 0.0, -1.0};
    for (std::size_t idx : coords) {
      const Real original = p->value[idx];
      const Real up = static_cast<Real>(static_cast<double>(original) + options.step);
      const Real down = static_cast<Real>(static_cast<double>(original) - options.step);
      p->value[idx] = up;
      const double loss_up = evaluate();
      p->value[idx] = down;
      const double loss_down = evaluate();
      p->value[idx] = original;

      // Divide by the step actually taken after rounding to Real.
      const double span = static_cast<double>(up) - static_cast<double>(down);
      const double numeric = (loss_up - loss_down) / span;
      const double analytic = static_cast<double>(p->grad[idx]);
      const double err = relative_error(analytic, numeric, options.floor);
      if (err > worst.rel_error) worst = {p->name, idx, analytic, numeric, err};
      ++report.coordinates_checked;
    }
    if (!coords.empty()) {
      worst.rel_error = std::max(worst.rel_error, 0.0);
      report.max_rel_error = std::max(report.max_rel_error, worst.rel_error);
      report.worst.push_back(worst);
    }
  }
  std::stable_sort(report.worst.begin(), report.worst.end(),
                   [](const GradCheckEntry& a, const GradCheckEntry& b) {
                     return a.rel_error > b.rel_error;
                   });
  return report;
}

template GradCheckReport grad_check<float>(const LossBuilder<float>&,
                                           std::span<Parameter<float>* const>,
                                           const GradCheckOptions&,
                                           const std::function<double()>&);
template GradCheckReport grad_check<double>(const LossBuilder<double>&,
                                            std::span<Parameter<double>* const>,
                                            const GradCheckOptions&,
                                            const std::function<double()>&);

}  // namespace dreamrec::num
