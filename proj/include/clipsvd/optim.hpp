// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "clipsvd/errors.hpp"
#include "clipsvd/linalg.hpp"

namespace clipsvd {

struct AdamWParams {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Moments for any number of parameter vectors ("slots") sharing one step
/// counter. Call `advance()` once per iteration, then `adamw_step` per slot.
struct AdamWState {
  struct Moments {
    Vector first;
    Vector second;
  };

  AdamWParams params;
  std::vector<Moments> slots;
  std::size_t step = 0;

  AdamWState() = default;
  explicit AdamWState(AdamWParams p) : params(p) {}

  void advance() { ++step; }
};

/// Bias-corrected Adam moment update plus decoupled decay:
///   θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ
/// Coordinates with trainable[i] == false are left exactly as they are (no
/// moment update, no decay).
inline void adamw_step(AdamWState& state, std::size_t slot, std::span<double> params,
                       std::span<const double> grads, const std::vector<bool>* trainable = nullptr) {
  if (params.size() != grads.size()) {
    throw ShapeError("adamw_step: params length " + std::to_string(params.size()) + " vs grads length " +
                     std::to_string(grads.size()));
  }
  if (trainable != nullptr && trainable->size() != params.size()) throw ShapeError("adamw_step: mask length");
  if (state.step == 0) throw UsageError("adamw_step: call advance() before the first update");
  if (state.slots.size() <= slot) state.slots.resize(slot + 1);
  auto& mom = state.slots[slot];
  if (mom.first.empty()) {
    mom.first.assign(params.size(), 0.0);
    mom.second.assign(params.size(), 0.0);
  }
  if (mom.first.size() != params.size()) throw ShapeError("adamw_step: slot length changed");

  const auto& p = state.params;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(p.beta1, t);
  const double correct2 = 1.0 - std::pow(p.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (trainable != nullptr && !(*trainable)[i]) continue;
    const double g = grads[i];
    mom.first[i] = p.beta1 * mom.first[i] + (1.0 - p.beta1) * g;
    mom.second[i] = p.beta2 * mom.second[i] + (1.0 - p.beta2) * g * g;
    const double mhat = mom.first[i] / correct1;
    const double vhat = mom.second[i] / correct2;
    const double theta = params[i];
    params[i] = theta - p.lr * (mhat / (std::sqrt(vhat) + p.eps)) - p.lr * p.weight_decay * theta;
  }
}

/// Single-vector convenience: advances the step counter and updates slot 0.
inline void adamw_step(AdamWState& state, std::span<double> params, std::span<const double> grads) {
  state.advance();
  adamw_step(state, 0, params, grads);
}

}  // namespace clipsvd
