// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lldiff/denoiser.hpp"

namespace lldiff {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam without weight decay. Moments are kept per parameter in the same
/// layout as the parameter set they belong to.
template <typename T>
struct AdamState {
  ParamSet<T> m;
  ParamSet<T> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const ParamSet<T>& params) {
    AdamState s;
    for (std::size_t i = 0; i < params.size(); ++i) {
      s.m.add(params.names[i], Tensor<T>(params.tensors[i].shape()));
      s.v.add(params.names[i], Tensor<T>(params.tensors[i].shape()));
    }
    return s;
  }

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

template <typename T>
void adam_update(ParamSet<T>& params, const std::vector<std::vector<T>>& grads, AdamState<T>& state, const AdamConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw DimensionError("adam: gradient/moment count does not match parameters");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params.tensors[p];
    auto& m = state.m.tensors[p];
    auto& v = state.v.tensors[p];
    const auto& g = grads[p];
    if (g.size() != w.size() || m.shape() != w.shape()) throw DimensionError("adam: shape mismatch for " + params.names[p]);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(w[i] - cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps));
    }
  }
}

/// Decay used on update n (1-based). With warmup the average forgets the
/// initialisation quickly on short runs.
inline double ema_decay_at(double decay, std::uint64_t n, bool warmup) {
  if (!warmup) return decay;
  return std::min(decay, (1.0 + static_cast<double>(n)) / (10.0 + static_cast<double>(n)));
}

/// shadow <- d * shadow + (1 - d) * params
template <typename T>
void ema_update(ParamSet<T>& shadow, const ParamSet<T>& params, double d) {
  if (shadow.size() != params.size()) throw DimensionError("ema: parameter count mismatch");
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& s = shadow.tensors[p];
    const auto& w = params.tensors[p];
    if (s.shape() != w.shape()) throw DimensionError("ema: shape mismatch for " + params.names[p]);
    for (std::size_t i = 0; i < w.size(); ++i) s[i] = static_cast<T>(d * s[i] + (1.0 - d) * w[i]);
  }
}

}  // namespace lldiff
