// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lldiff/nn_ops.hpp"
#include "lldiff/rng.hpp"

namespace lldiff {

/// Ordered collection of named tensors.
template <typename T>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  std::size_t size() const noexcept { return tensors.size(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return i;
    }
    throw IndexError("no parameter named " + name);
  }

  const Tensor<T>& at(const std::string& name) const { return tensors[index_of(name)]; }

  void add(std::string name, Tensor<T> t) {
    names.push_back(std::move(name));
    tensors.push_back(std::move(t));
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.names == b.names && a.tensors == b.tensors; }
};

struct DenoiserConfig {
  std::size_t base_channels = 16;

  static constexpr std::size_t kInputChannels = 6;  // concat(low-light, noisy sample)
  static constexpr std::size_t kImageChannels = 3;
  static constexpr std::size_t kEmbedDim = 16;
  static constexpr std::size_t kKernel = 3;

  void validate() const {
    if (base_channels < 4) throw ConfigError("base_channels must be >= 4");
  }
};

/// Sinusoidal features of sqrt(alpha_bar): sin/cos at frequencies spaced
/// geometrically from 1 to 1e4. Returns N x kEmbedDim.
template <typename T>
Tensor<T> noise_level_embedding(std::span<const double> alpha_bars) {
  constexpr std::size_t half = DenoiserConfig::kEmbedDim / 2;
  Tensor<T> out({alpha_bars.size(), DenoiserConfig::kEmbedDim});
  for (std::size_t n = 0; n < alpha_bars.size(); ++n) {
    const double s = std::sqrt(alpha_bars[n]);
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::pow(10.0, 4.0 * static_cast<double>(k) / static_cast<double>(half - 1));
      out[n * DenoiserConfig::kEmbedDim + k] = static_cast<T>(std::sin(freq * s));
      out[n * DenoiserConfig::kEmbedDim + half + k] = static_cast<T>(std::cos(freq * s));
    }
  }
  return out;
}

namespace detail {

template <typename T>
Tensor<T> fan_in_gaussian(Shape shape, std::size_t fan_in, Rng& rng) {
  return rng.normal_tensor<T>(std::move(shape), std::sqrt(1.0 / static_cast<double>(fan_in)));
}

}  // namespace detail

/// Trunk (and uncertainty head) parameter layout for the reference
/// architecture, in a fixed order. Weights are fan-in-scaled Gaussians,
/// biases zero.
template <typename T>
ParamSet<T> init_denoiser(std::uint64_t seed, const DenoiserConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0x7472756e6bull}));
  const std::size_t c = cfg.base_channels, k = DenoiserConfig::kKernel, e = DenoiserConfig::kEmbedDim;
  ParamSet<T> p;
  auto conv = [&](const std::string& name, std::size_t in, std::size_t out) {
    p.add(name + ".w", detail::fan_in_gaussian<T>({out, in, k, k}, in * k * k, rng));
    p.add(name + ".b", Tensor<T>({out}));
  };
  auto stage = [&](const std::string& name, std::size_t in, std::size_t out) {
    conv(name + ".conv1", in, out);
    p.add(name + ".scale.w", detail::fan_in_gaussian<T>({out, e}, e, rng));
    p.add(name + ".scale.b", Tensor<T>({out}));
    p.add(name + ".shift.w", detail::fan_in_gaussian<T>({out, e}, e, rng));
    p.add(name + ".shift.b", Tensor<T>({out}));
    conv(name + ".conv2", out, out);
  };
  stage("enc1", DenoiserConfig::kInputChannels, c);
  stage("enc2", c, 2 * c);
  stage("mid", 2 * c, 4 * c);
  conv("up2", 4 * c, 2 * c);
  stage("dec2", 4 * c, 2 * c);
  conv("up1", 2 * c, c);
  stage("dec1", 2 * c, c);
  conv("out", c, DenoiserConfig::kImageChannels);
  return p;
}

template <typename T>
ParamSet<T> init_uncertainty_head(std::uint64_t seed, const DenoiserConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0x68656164ull}));
  const std::size_t c = cfg.base_channels, k = DenoiserConfig::kKernel;
  ParamSet<T> p;
  p.add("head.w", detail::fan_in_gaussian<T>({DenoiserConfig::kImageChannels, c, k, k}, c * k * k, rng));
  p.add("head.b", Tensor<T>({DenoiserConfig::kImageChannels}));
  return p;
}

/// Parameters of a ParamSet bound to a tape, addressable by name.
template <typename T>
class BoundParams {
 public:
  BoundParams(Tape<T>& tape, const ParamSet<T>& params, bool trainable) : params_(&params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      vars_.push_back(trainable ? tape.leaf(params.tensors[i]) : tape.constant(params.tensors[i]));
      index_.emplace(params.names[i], i);
    }
  }

  /// Binds already-recorded Vars, one per entry of `params`.
  BoundParams(const ParamSet<T>& params, std::vector<Var<T>> vars) : params_(&params), vars_(std::move(vars)) {
    if (vars_.size() != params.size()) throw DimensionError("BoundParams: var count does not match parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (vars_[i].shape() != params.tensors[i].shape()) throw DimensionError("BoundParams: shape mismatch for " + params.names[i]);
      index_.emplace(params.names[i], i);
    }
  }

  Var<T> operator()(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IndexError("no parameter named " + name);
    return vars_[it->second];
  }

  const std::vector<Var<T>>& vars() const noexcept { return vars_; }

  /// Gradients after a backward sweep, in layout order.
  std::vector<std::vector<T>> grads() const {
    std::vector<std::vector<T>> g;
    for (const auto& v : vars_) g.push_back(v.tape->grad(v));
    return g;
  }

 private:
  const ParamSet<T>* params_;
  std::vector<Var<T>> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
struct DenoiserOutput {
  Var<T> eps_hat;
  Var<T> features;  // final trunk features, input of both output heads
};

/// eps_theta(y, x_t, alpha_bar) on N x 3 x H x W batches; one noise level per
/// batch element. H and W must be divisible by 4.
template <typename T>
DenoiserOutput<T> denoiser_forward(const BoundParams<T>& p, Var<T> y, Var<T> x_t, std::span<const double> alpha_bars) {
  const Shape& ys = y.shape();
  if (ys.size() != 4 || ys[1] != 3 || x_t.shape() != ys) {
    throw DimensionError("denoiser: y " + to_string(ys) + " and x_t " + to_string(x_t.shape()) +
                         " must be matching N x 3 x H x W tensors");
  }
  if (ys[2] % 4 || ys[3] % 4) throw DimensionError("denoiser: H and W must be divisible by 4, got " + to_string(ys));
  if (alpha_bars.size() != ys[0]) throw DimensionError("denoiser: one alpha_bar per batch element required");
  for (double ab : alpha_bars) {
    if (!(ab > 0.0 && ab <= 1.0)) throw NumericalError("denoiser: alpha_bar must lie in (0, 1]");
  }
  Tape<T>& tape = *y.tape;
  const Var<T> emb = tape.constant(noise_level_embedding<T>(alpha_bars));

  auto conv = [&](const std::string& name, Var<T> x) { return conv2d(x, p(name + ".w"), p(name + ".b")); };
  auto stage = [&](const std::string& name, Var<T> x) {
    Var<T> h = conv(name + ".conv1", x);
    h = channel_affine(h, linear(emb, p(name + ".scale.w"), p(name + ".scale.b")),
                       linear(emb, p(name + ".shift.w"), p(name + ".shift.b")));
    h = silu(h);
    return silu(conv(name + ".conv2", h));
  };

  const Var<T> e1 = stage("enc1", concat_channels(y, x_t));
  const Var<T> e2 = stage("enc2", avg_pool2(e1));
  const Var<T> m = stage("mid", avg_pool2(e2));
  const Var<T> d2 = stage("dec2", concat_channels(conv("up2", upsample_nearest2(m)), e2));
  const Var<T> d1 = stage("dec1", concat_channels(conv("up1", upsample_nearest2(d2)), e1));
  return {conv("out", d1), d1};
}

/// Log-scale uncertainty map from trunk features.
template <typename T>
Var<T> uncertainty_head_forward(const BoundParams<T>& head, Var<T> features) {
  return conv2d(features, head("head.w"), head("head.b"));
}

}  // namespace lldiff
