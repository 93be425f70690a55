#pragma once

// Central finite-difference oracle for backward(). Test-only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "glsm/ops.hpp"
#include "glsm/rng.hpp"
#include "glsm/tensor.hpp"

namespace glsm::testing {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "input[i]" of the worst element
};

// Random linear functional of an output: sum(y * w) with fixed w.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return ops::sum(ops::mul(y, Tensor(y.shape(), std::move(w))));
}

/// Compares backward() against central differences for every element of
/// every input. `inputs` must be leaves with requires_grad set. `floor`
/// bounds the denominator so near-zero gradients are compared absolutely.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn,
                                  std::vector<Tensor> inputs, double h = 1e-5,
                                  double floor = 1e-3) {
  for (auto& t : inputs) t.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs)
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.numel(), 0.0));
  GradCheckResult res;
  NoGradGuard guard;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto vals = inputs[k].values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = loss_fn().item();
      vals[i] = orig - h;
      const double fm = loss_fn().item();
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input" + std::to_string(k) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace glsm::testing
