// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>

#include "lldiff/tape.hpp"

namespace lldiff {

/// mean(exp(-p) * |eps - eps_hat|) + 2 * mean(p). Per pixel the minimiser in
/// p is ln(|r| / 2).
template <typename T>
Var<T> uncertainty_loss(const Tensor<T>& eps, Var<T> eps_hat, Var<T> p) {
  if (eps.shape() != eps_hat.shape() || eps.shape() != p.shape()) {
    throw DimensionError("uncertainty_loss: eps " + to_string(eps.shape()) + ", eps_hat " + to_string(eps_hat.shape()) +
                         ", p " + to_string(p.shape()));
  }
  Tape<T>& tape = *p.tape;
  const Var<T> residual = abs(sub(tape.constant(eps), eps_hat));
  return add(mean(mul(exp(neg(p)), residual)), mul(mean(p), T{2}));
}

enum class WeightMode {
  kExpClamped,  // w = clamp(exp(p), 0.1, 10)
  kRaw,         // w = p, as literally written; may go negative
};

inline constexpr double kWeightMin = 0.1;
inline constexpr double kWeightMax = 10.0;

/// Per-pixel weights derived from an uncertainty map.
template <typename T>
Tensor<T> uncertainty_weights(const Tensor<T>& p, WeightMode mode = WeightMode::kExpClamped) {
  Tensor<T> w(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) {
    w[i] = mode == WeightMode::kRaw ? p[i] : static_cast<T>(std::clamp(std::exp(static_cast<double>(p[i])), kWeightMin, kWeightMax));
  }
  return w;
}

/// lambda * mean(w * |eps - eps_hat|). The map p comes from the frozen
/// pretrained network, so the weights carry no gradient.
template <typename T>
Var<T> weighted_noise_loss(const Tensor<T>& eps, Var<T> eps_hat, const Tensor<T>& p, double lambda,
                           WeightMode mode = WeightMode::kExpClamped) {
  if (eps.shape() != eps_hat.shape() || eps.shape() != p.shape()) {
    throw DimensionError("weighted_noise_loss: eps " + to_string(eps.shape()) + ", eps_hat " + to_string(eps_hat.shape()) +
                         ", p " + to_string(p.shape()));
  }
  if (!(lambda > 0.0)) throw ConfigError("weighted_noise_loss: lambda must be positive");
  Tape<T>& tape = *eps_hat.tape;
  const Var<T> residual = abs(sub(tape.constant(eps), eps_hat));
  return mul(mean(mul_const(residual, uncertainty_weights(p, mode))), static_cast<T>(lambda));
}

/// Unweighted variant used when the uncertainty switch is off.
template <typename T>
Var<T> plain_noise_loss(const Tensor<T>& eps, Var<T> eps_hat, double lambda) {
  if (eps.shape() != eps_hat.shape()) throw DimensionError("plain_noise_loss: shape mismatch");
  if (!(lambda > 0.0)) throw ConfigError("plain_noise_loss: lambda must be positive");
  Tape<T>& tape = *eps_hat.tape;
  return mul(mean(abs(sub(tape.constant(eps), eps_hat))), static_cast<T>(lambda));
}

}  // namespace lldiff
