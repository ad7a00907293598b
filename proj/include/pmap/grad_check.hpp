#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pmap/nn.hpp"

namespace pmap {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double analytic = 0.0, numeric = 0.0;
  int checked = 0;

  bool ok(double tolerance) const { return max_rel_err <= tolerance; }
};

inline double grad_rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-4});
}

// Compares analytic gradients (already present in params[i]->grad) against
// central finite differences of loss_only. Runs on the double instantiation
// of a model; the step is h = 1e-5 * max(1, |theta|).
template <typename F>
inline GradCheckReport check_gradients(const ParamRefs<double>& params, F&& loss_only,
                                       Rng& rng, int samples_per_tensor = 8) {
  GradCheckReport rep;
  for (auto* p : params) {
    int64_t n = p->value.numel();
    int samples = static_cast<int>(std::min<int64_t>(n, samples_per_tensor));
    for (int s = 0; s < samples; ++s) {
      int64_t i = n <= samples_per_tensor
                      ? s
                      : static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(n)));
      double theta = p->value[i];
      double h = 1e-5 * std::max(1.0, std::abs(theta));
      p->value[i] = theta + h;
      double lp = loss_only();
      p->value[i] = theta - h;
      double lm = loss_only();
      p->value[i] = theta;
      double numeric = (lp - lm) / (2.0 * h);
      double analytic = p->grad[i];
      double err = grad_rel_err(analytic, numeric);
      ++rep.checked;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_param = p->name;
        rep.worst_index = i;
        rep.analytic = analytic;
        rep.numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace pmap
