// Copyright (c) 2026 The pcmae Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Central finite-difference oracle for the autodiff engine. Test-only; it
// evaluates the forward function with no tape and never reads analytic
// gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "pcmae/rng.hpp"
#include "pcmae/tensor.hpp"

namespace pcmae::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Relative error with a small absolute floor so that exact zeros on both
/// sides compare equal.
inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

/// Compares the analytic gradient of `loss_fn` (evaluated on a tape) with
/// central differences at step h for every element of every input.
inline GradCheckResult check_gradients(
    const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> inputs,
    double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = loss_fn();
    tape.backward(loss);
  }
  GradCheckResult res;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = t.data()[i];
      t.data()[i] = orig + h;
      const double fp = loss_fn().item();
      t.data()[i] = orig - h;
      const double fm = loss_fn().item();
      t.data()[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      res.max_rel_error = std::max(res.max_rel_error, rel_error(analytic[i], numeric));
      ++res.checked;
    }
  }
  return res;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

/// sum(out * w) with fixed random weights so every output element gets a
/// distinct upstream gradient.
inline Tensor<double> weighted_sum(const Tensor<double>& out, const Tensor<double>& w) {
  return sum(mul(out, w));
}

}  // namespace pcmae::testing
