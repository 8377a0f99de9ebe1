// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include "lldiff/data.hpp"
#include "lldiff/denoiser.hpp"
#include "lldiff/diffusion.hpp"
#include "lldiff/gradcheck.hpp"
#include "lldiff/losses.hpp"
#include "lldiff/nn_ops.hpp"
#include "lldiff/structure.hpp"
#include "lldiff/svd.hpp"

namespace lldiff {

template <typename T>
struct GradCase {
  std::string name;
  ScalarFunction<T> fn;
  std::vector<Tensor<T>> inputs;
  GradCheckOptions opts;
};

/// Every differentiable building block, from single ops up to the full
/// training objective and the whole network. The draws do not depend on T,
/// so the float and double lists describe the same functions.
template <typename T>
std::vector<GradCase<T>> gradient_cases() {
  Rng rng(0x9d5);
  auto normal = [&](Shape s, double sd = 1.0) { return rng.normal_tensor<T>(std::move(s), sd); };
  // Projects an output onto a fixed random direction so every entry of the
  // Jacobian contributes.
  auto probe_of = [](Tensor<T> w) {
    return [w = std::move(w)](Var<T> v) { return sum(mul_const(v, w)); };
  };

  std::vector<GradCase<T>> out;
  auto check = [&](std::string name, ScalarFunction<T> fn, std::vector<Tensor<T>> in, GradCheckOptions opts = {}) {
    out.push_back({std::move(name), std::move(fn), std::move(in), opts});
  };

  {
    const auto w = probe_of(normal({3, 4}));
    check("elementwise", [w](Tape<T>&, const std::vector<Var<T>>& v) {
      const Var<T> a = v[0], b = v[1];
      Var<T> r = add(mul(exp(mul(a, T(0.5))), silu(b)), sub(neg(a), mul(b, b)));
      r = add(r, abs(add(b, T(3))));  // shifted well away from the kink
      return add(w(reshape(r, {3, 4})), mean(r));
    }, {normal({12}), normal({12})});
  }
  {
    const auto w = probe_of(normal({2, 4, 6, 6}));
    check("conv2d", [w](Tape<T>&, const std::vector<Var<T>>& v) { return w(conv2d(v[0], v[1], v[2])); },
          {normal({2, 3, 6, 6}), normal({4, 3, 3, 3}, 0.3), normal({4})});
  }
  {
    const auto wp = probe_of(normal({2, 3, 2, 3}));
    const auto wu = probe_of(normal({2, 3, 8, 12}));
    const auto wc = probe_of(normal({2, 5, 4, 6}));
    check("avg_pool2", [wp](Tape<T>&, const std::vector<Var<T>>& v) { return wp(avg_pool2(v[0])); }, {normal({2, 3, 4, 6})});
    check("upsample_nearest2", [wu](Tape<T>&, const std::vector<Var<T>>& v) { return wu(upsample_nearest2(v[0])); },
          {normal({2, 3, 4, 6})});
    check("concat_channels", [wc](Tape<T>&, const std::vector<Var<T>>& v) { return wc(concat_channels(v[0], v[1])); },
          {normal({2, 2, 4, 6}), normal({2, 3, 4, 6})});
  }
  {
    // Noise-level embedding -> linear -> per-channel affine on a feature map.
    const std::vector<double> ab = {0.9, 0.2};
    const Tensor<T> emb = noise_level_embedding<T>(std::span<const double>(ab));
    const std::size_t e = emb.dim(1);
    const auto w = probe_of(normal({2, 3, 4, 4}));
    check("embedding_affine", [=](Tape<T>& tape, const std::vector<Var<T>>& v) {
      const Var<T> scale = linear(tape.constant(emb), v[1], v[2]);  // 2 x 3
      const Var<T> shift = silu(linear(tape.constant(emb), v[3], v[4]));
      return w(channel_affine(v[0], scale, shift));
    }, {normal({2, 3, 4, 4}), normal({3, e}, 0.3), normal({3}), normal({3, e}, 0.3), normal({3})});
  }
  {
    const auto idx = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{4, 0, 0, 7, 3, 1});
    const auto w = probe_of(normal({2, 3}));
    check("gather", [=](Tape<T>&, const std::vector<Var<T>>& v) { return w(gather(v[0], idx, {2, 3})); }, {normal({8})});
  }
  {
    // Well separated spectrum: diagonal plus a small perturbation.
    Tensor<T> m = normal({6, 4}, 0.05);
    for (std::size_t i = 0; i < 4; ++i) m[i * 4 + i] += static_cast<T>(4.0 - static_cast<double>(i));
    const auto w = probe_of(normal({4}));
    check("singular_values", [w](Tape<T>&, const std::vector<Var<T>>& v) { return w(singular_values(v[0])); }, {m});
  }

  const auto sched = NoiseSchedule::linear(40, 1e-4, 2e-2);
  const Tensor<T> z = normal({2, 3, 8, 8});
  const std::vector<std::size_t> ts = {5, 31};
  {
    const auto w = probe_of(normal({2, 3, 8, 8}));
    check("reverse_step", [=](Tape<T>&, const std::vector<Var<T>>& v) {
      return w(learnable_prev(v[0], v[1], std::span<const std::size_t>(ts), sched, &z));
    }, {normal({2, 3, 8, 8}), normal({2, 3, 8, 8})});
  }
  {
    // Phase-2 objective as a function of the noise estimate: weighted noise
    // term plus the kappa-weighted rank term on the reverse step's output.
    const Image gt_img = synth_scene(3, 16, 16, 2);
    Image small({8, 8, 3});
    for (std::size_t i = 0; i < small.size(); ++i) small[i] = gt_img[i];
    const Patches gt = patchify(small, 4);
    const ClusterSet cs = cluster_kmeans(gt, 2, 1);
    const auto gt_mats = build_matrices<T>(cs, gt);
    const Tensor<T> eps = normal({1, 3, 8, 8}), p = normal({1, 3, 8, 8}, 0.5);
    const std::size_t t = 3;
    check("training_objective", [=](Tape<T>& tape, const std::vector<Var<T>>& v) {
      const Var<T> noise = weighted_noise_loss(eps, v[1], p, 10.0);
      const Var<T> x_prev = learnable_prev(v[0], v[1], t, sched);
      return add(noise, weighted_rank_loss(build_matrices(cs, x_prev, 0), gt_mats, t, sched));
    }, {normal({1, 3, 8, 8}), normal({1, 3, 8, 8})});
  }
  {
    const Tensor<T> eps = normal({2, 3, 4, 4});
    check("uncertainty_loss", [=](Tape<T>&, const std::vector<Var<T>>& v) { return uncertainty_loss(eps, v[0], v[1]); },
          {normal({2, 3, 4, 4}), normal({2, 3, 4, 4})});
  }
  {
    DenoiserConfig cfg;
    cfg.base_channels = 4;
    const auto params = init_denoiser<T>(7, cfg);
    const Tensor<T> y = normal({1, 3, 8, 8}, 0.3);
    const auto w = probe_of(normal({1, 3, 8, 8}));
    const std::vector<double> ab = {0.4};
    std::vector<Tensor<T>> in{normal({1, 3, 8, 8})};
    for (const auto& t : params.tensors) in.push_back(t);
    GradCheckOptions opts;
    opts.max_entries_per_input = 24;
    check("denoiser", [=](Tape<T>& tape, const std::vector<Var<T>>& v) {
      const BoundParams<T> view(params, std::vector<Var<T>>(v.begin() + 1, v.end()));
      return w(denoiser_forward(view, tape.constant(y), v[0], std::span<const double>(ab)).eps_hat);
    }, in, opts);
  }
  return out;
}

enum class Precision { kFloat64, kFloat32 };

inline constexpr double gradient_tolerance(Precision p) { return p == Precision::kFloat64 ? 1e-4 : 1e-3; }

/// Runs the whole suite. In float32 mode the backward pass runs in float and
/// the finite-difference reference in double (see grad_check_mixed).
inline std::vector<GradCheckReport> run_gradient_suite(Precision p) {
  const double tol = gradient_tolerance(p);
  const auto c64 = gradient_cases<double>();
  std::vector<GradCheckReport> out;
  if (p == Precision::kFloat64) {
    for (const auto& c : c64) out.push_back(grad_check<double>(c.name + " f64", c.fn, c.inputs, tol, c.opts));
    return out;
  }
  const auto c32 = gradient_cases<float>();
  for (std::size_t i = 0; i < c32.size(); ++i) {
    out.push_back(grad_check_mixed(c32[i].name + " f32", c32[i].fn, c64[i].fn, c32[i].inputs, tol, c32[i].opts));
  }
  return out;
}

}  // namespace lldiff
