// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "ectrace/autodiff.hpp"

namespace ectrace::ad {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; only used by adamw_step
};

/// One Adam update of params in place. Moments are kept in double.
template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8) {
  if (params.size() != grads.size()) throw ShapeMismatch("adam_step: params and grads differ in size");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] = static_cast<T>(params[i] - lr * mhat / (std::sqrt(vhat) + eps));
  }
}

/// AdamW: weights shrink by (1 - lr * weight_decay) before the Adam update.
template <class T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr, double weight_decay,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (weight_decay != 0.0) {
    const double shrink = 1.0 - lr * weight_decay;
    for (auto& p : params) p = static_cast<T>(p * shrink);
  }
  adam_step(params, grads, state, lr, beta1, beta2, eps);
}

/// Owns the moment state for a list of parameter tensors.
template <class T>
class Optimizer {
 public:
  Optimizer(std::vector<Tensor<T>> params, AdamSettings settings, bool decoupled_decay)
      : params_(std::move(params)), states_(params_.size()), s_(settings), decoupled_(decoupled_decay) {}

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      std::span<const T> g = p.grad();
      if (decoupled_) {
        adamw_step<T>(p.values(), g, states_[i], s_.lr, s_.weight_decay, s_.beta1, s_.beta2, s_.eps);
      } else {
        adam_step<T>(p.values(), g, states_[i], s_.lr, s_.beta1, s_.beta2, s_.eps);
      }
    }
  }

  AdamSettings& settings() { return s_; }
  const std::vector<AdamState>& states() const { return states_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<AdamState> states_;
  AdamSettings s_;
  bool decoupled_;
};

}  // namespace ectrace::ad
