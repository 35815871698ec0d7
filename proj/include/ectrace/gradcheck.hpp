// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ectrace/autodiff.hpp"

namespace ectrace::ad {

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps
/// coordinates whose true derivative is zero from dividing by noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using ScalarFn = std::function<Tensor<double>(Graph<double>&)>;

/// Compares the tape gradient of f with respect to every tensor in `inputs`
/// against central differences, step h * max(1, |x|). Returns the maximum
/// relative error over all coordinates.
inline double grad_check(const ScalarFn& f, std::vector<Tensor<double>> inputs, double h = 1e-5) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  {
    Graph<double> g;
    g.backward(f(g));
  }
  double worst = 0.0;
  for (auto& x : inputs) {
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double x0 = x[i];
      const double step = h * std::max(1.0, std::abs(x0));
      Graph<double> gp(false);
      x[i] = x0 + step;
      const double fp = f(gp).item();
      Graph<double> gm(false);
      x[i] = x0 - step;
      const double fm = f(gm).item();
      x[i] = x0;
      worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * step)));
    }
  }
  return worst;
}

/// Single-input form: f receives the graph and x.
inline double grad_check(const std::function<Tensor<double>(Graph<double>&, Tensor<double>)>& f, Tensor<double> x,
                         double h = 1e-5) {
  return grad_check([&](Graph<double>& g) { return f(g, x); }, std::vector<Tensor<double>>{x}, h);
}

}  // namespace ectrace::ad
