#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "wstrack/rng.hpp"
#include "wstrack/tensor.hpp"

namespace wstrack {

// Central-difference check of analytic gradients.
//
// `loss_fn` must recompute the scalar loss from the current parameter
// values and leave the analytic gradients in each Parameter::grad.
// Coordinates are sampled (all of them when a tensor is small) and the
// returned value is
//   max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// A non-finite loss anywhere reports as +inf.
inline double grad_check(const std::function<double()>& loss_fn, std::span<Parameter*> params,
                         double eps = 1e-6, int max_coords_per_tensor = 64, uint64_t sample_seed = 7) {
  double base = loss_fn();
  if (!std::isfinite(base)) return std::numeric_limits<double>::infinity();

  std::vector<Tensor4> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  SeededRng rng(sample_seed);
  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    const int64_t total = p.value.size();
    std::vector<int64_t> coords;
    if (total <= max_coords_per_tensor) {
      coords.resize(size_t(total));
      for (int64_t i = 0; i < total; ++i) coords[size_t(i)] = i;
    } else {
      for (int i = 0; i < max_coords_per_tensor; ++i)
        coords.push_back(int64_t(rng.uniform_int(uint64_t(total))));
    }
    for (int64_t ci : coords) {
      double saved = p.value.v[size_t(ci)];
      p.value.v[size_t(ci)] = saved + eps;
      double lp = loss_fn();
      p.value.v[size_t(ci)] = saved - eps;
      double lm = loss_fn();
      p.value.v[size_t(ci)] = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm))
        return std::numeric_limits<double>::infinity();
      double numeric = (lp - lm) / (2.0 * eps);
      double a = analytic[pi].v[size_t(ci)];
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  // restore analytic grads for the caller
  loss_fn();
  for (size_t pi = 0; pi < params.size(); ++pi) params[pi]->grad = analytic[pi];
  return max_rel;
}

}  // namespace wstrack
