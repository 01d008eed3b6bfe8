// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/named_tensors.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>

namespace dranet {

template <typename Scalar>
struct AdamState {
  NamedTensors<Scalar> m;
  NamedTensors<Scalar> v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  /// Zero moments shaped like `params`.
  static AdamState for_params(const NamedTensors<Scalar>& params, double beta1 = 0.9, double beta2 = 0.999,
                              double eps = 1e-8) {
    AdamState s;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    for (const auto& [name, p] : params) {
      s.m.insert(name, Tensor4<Scalar>(p.shape()));
      s.v.insert(name, Tensor4<Scalar>(p.shape()));
    }
    return s;
  }

  bool operator==(const AdamState& o) const {
    return m == o.m && v == o.v && t == o.t && beta1 == o.beta1 && beta2 == o.beta2 && eps == o.eps;
  }
};

/// One bias-corrected Adam update. With `clip_norm` set, gradients are scaled
/// so their global L2 norm does not exceed it.
template <typename Scalar>
void adam_step(NamedTensors<Scalar>& params, const NamedTensors<Scalar>& grads, AdamState<Scalar>& state, double lr,
               std::optional<double> clip_norm = std::nullopt) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  double norm2 = 0.0;
  for (const auto& [name, p] : params) {
    const auto& g = grads.at(name);
    if (g.shape() != p.shape()) {
      throw ShapeError("adam_step: gradient of '" + name + "' has shape " + g.shape().str() + ", parameter " +
                       p.shape().str());
    }
    if (state.m.at(name).shape() != p.shape() || state.v.at(name).shape() != p.shape()) {
      throw ShapeError("adam_step: optimizer state of '" + name + "' does not match the parameter shape");
    }
    if (!g.all_finite()) throw NumericError("adam_step: non-finite gradient for parameter '" + name + "'");
    if (clip_norm) norm2 += g.array().template cast<double>().square().sum();
  }
  Scalar grad_scale = Scalar(1);
  if (clip_norm && std::sqrt(norm2) > *clip_norm) grad_scale = static_cast<Scalar>(*clip_norm / std::sqrt(norm2));

  state.t += 1;
  const auto t = static_cast<double>(state.t);
  const auto b1 = static_cast<Scalar>(state.beta1);
  const auto b2 = static_cast<Scalar>(state.beta2);
  const auto correction1 = static_cast<Scalar>(1.0 - std::pow(state.beta1, t));
  const auto correction2 = static_cast<Scalar>(1.0 - std::pow(state.beta2, t));
  const auto step = static_cast<Scalar>(lr);
  const auto eps = static_cast<Scalar>(state.eps);
  for (auto& [name, p] : params) {
    const auto g = grads.at(name).array() * grad_scale;
    auto& m = state.m.at(name).array();
    auto& v = state.v.at(name).array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    p.array() -= step * (m / correction1) / ((v / correction2).sqrt() + eps);
  }
}

/// lr0 * 0.5^floor(iter / period)
inline double lr_step_halving(std::int64_t iter, double lr0 = 1e-4, std::int64_t period = 100000) {
  if (iter < 0) throw ConfigError("iteration must be >= 0");
  if (period < 1) throw ConfigError("halving period must be >= 1");
  return std::ldexp(lr0, -static_cast<int>(iter / period));
}

/// Cosine annealing from lr0 at epoch 0 to lr_min at epoch `total`.
inline double lr_cosine(double epoch, double total = 120, double lr0 = 2e-4, double lr_min = 1e-6) {
  if (!(total > 0)) throw ConfigError("cosine schedule needs total > 0");
  if (epoch < 0 || epoch > total) throw ConfigError("epoch outside [0, total]");
  if (epoch == 0) return lr0;
  if (epoch == total) return lr_min;
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * epoch / total));
}

}  // namespace dranet
