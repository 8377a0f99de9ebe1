// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lldiff/denoiser.hpp"
#include "lldiff/image_io.hpp"
#include "lldiff/schedules.hpp"

namespace lldiff {

/// Closed-form noisy sample sqrt(ab) * x0 + sqrt(1 - ab) * eps.
template <typename T>
Tensor<T> forward_sample(const Tensor<T>& x0, double alpha_bar, const Tensor<T>& eps) {
  if (x0.shape() != eps.shape()) throw DimensionError("forward_sample: x0 " + to_string(x0.shape()) + " vs eps " + to_string(eps.shape()));
  if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) throw NumericalError("forward_sample: alpha_bar must lie in (0, 1]");
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a * x0[i] + b * eps[i]);
  return out;
}

/// Inverse of forward_sample for a given noise estimate.
template <typename T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& eps_hat, double alpha_bar) {
  if (x_t.shape() != eps_hat.shape()) throw DimensionError("predict_x0: shape mismatch");
  if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) throw NumericalError("predict_x0: alpha_bar must lie in (0, 1]");
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  Tensor<T> out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>((x_t[i] - b * eps_hat[i]) / a);
  return out;
}

/// Coefficients of x_{t-1} = c_x x_t - c_eps eps_hat + sigma z.
struct ReverseCoefficients {
  double c_x;
  double c_eps;
  double sigma;
};

inline ReverseCoefficients reverse_coefficients(const StepParams& s) {
  const double c_x = 1.0 / std::sqrt(s.alpha);
  const double denom = std::sqrt(1.0 - s.alpha_bar);
  const double c_eps = denom > 0.0 ? c_x * (1.0 - s.alpha) / denom : 0.0;
  return {c_x, c_eps, s.sigma};
}

/// Learnable previous-step sample on a batch: element n uses schedule row
/// ts[n]. Differentiable w.r.t. eps_hat (and x_t if it is a tape leaf). The
/// noise term is skipped at t = 1 and when `z` is empty.
template <typename T>
Var<T> learnable_prev(Var<T> x_t, Var<T> eps_hat, std::span<const std::size_t> ts, const NoiseSchedule& schedule,
                      const Tensor<T>* z = nullptr) {
  const Shape& s = x_t.shape();
  if (eps_hat.shape() != s) throw DimensionError("learnable_prev: x_t and eps_hat shapes differ");
  if (ts.empty() || s[0] != ts.size()) throw DimensionError("learnable_prev: one timestep per batch element required");
  if (z && z->shape() != s) throw DimensionError("learnable_prev: z shape mismatch");
  const std::size_t per = x_t.size() / ts.size();
  Tensor<T> cx(s), ce(s), noise(s);
  for (std::size_t n = 0; n < ts.size(); ++n) {
    const std::size_t t = ts[n];
    if (t < 1 || t > schedule.steps()) throw IndexError("learnable_prev: timestep " + std::to_string(t) + " out of range");
    const auto c = reverse_coefficients(schedule.row(t));
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
      cx[i] = static_cast<T>(c.c_x);
      ce[i] = static_cast<T>(c.c_eps);
      noise[i] = (z && t > 1) ? static_cast<T>(c.sigma * (*z)[i]) : T{0};
    }
  }
  Tape<T>& tape = *x_t.tape;
  Var<T> out = sub(mul_const(x_t, cx), mul_const(eps_hat, ce));
  return add(out, tape.constant(std::move(noise)));
}

/// Single-sample convenience overload.
template <typename T>
Var<T> learnable_prev(Var<T> x_t, Var<T> eps_hat, std::size_t t, const NoiseSchedule& schedule,
                      const Tensor<T>* z = nullptr) {
  if (t < 1 || t > schedule.steps()) throw IndexError("learnable_prev: timestep " + std::to_string(t) + " out of range");
  const std::size_t ts[] = {t};
  Var<T> xv = reshape(x_t, Shape{1, x_t.size()});
  Var<T> ev = reshape(eps_hat, Shape{1, eps_hat.size()});
  std::optional<Tensor<T>> zr;
  if (z) zr = z->reshaped({1, z->size()});
  return reshape(learnable_prev(xv, ev, std::span<const std::size_t>(ts), schedule, zr ? &*zr : nullptr), x_t.shape());
}

/// Noise estimator used by the sampler: (y, x_t, alpha_bar) -> eps_hat, all
/// tensors 1 x 3 x H x W.
template <typename T>
using NoiseEstimator = std::function<Tensor<T>(const Tensor<T>& y, const Tensor<T>& x_t, double alpha_bar)>;

/// Estimator evaluating the denoiser without recording gradients.
template <typename T>
NoiseEstimator<T> make_estimator(const ParamSet<T>& params) {
  return [&params](const Tensor<T>& y, const Tensor<T>& x_t, double alpha_bar) {
    Tape<T> tape;
    BoundParams<T> bound(tape, params, false);
    const double ab[] = {alpha_bar};
    return denoiser_forward(bound, tape.constant(y), tape.constant(x_t), std::span<const double>(ab)).eps_hat.value();
  };
}

struct TrajectoryPoint {
  std::size_t step = 0;  // S for the initial noise, 0 for the output
  double alpha_bar = 0.0;
  double mean_intensity = 0.0;
  std::optional<double> dist_to_gt;
  Image snapshot;
};

struct TrajectoryRecord {
  std::vector<TrajectoryPoint> points;

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    const bool gt = !points.empty() && points.front().dist_to_gt.has_value();
    os << "step,alpha_bar,mean_intensity" << (gt ? ",dist_to_gt" : "") << '\n';
    char buf[128];
    for (const auto& p : points) {
      std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g", p.step, p.alpha_bar, p.mean_intensity);
      os << buf;
      if (gt) {
        std::snprintf(buf, sizeof buf, ",%.10g", *p.dist_to_gt);
        os << buf;
      }
      os << '\n';
    }
    if (!os) throw IoError("write failed for " + path);
  }
};

struct EnhanceOptions {
  bool record = false;
  bool zero_noise = false;         // sigma_t forced to 0 on every step
  const Image* ground_truth = nullptr;  // enables dist_to_gt in the record
};

struct EnhanceResult {
  Image x0_hat;
  TrajectoryRecord trajectory;
  std::size_t steps_run = 0;
};

/// Conditional reverse process from pure noise over an inference schedule.
/// Output is clamped to [0, 1] once, after the final step.
template <typename T>
EnhanceResult enhance(const NoiseEstimator<T>& estimator, const Image& y, const InferenceSchedule& schedule, Rng& rng,
                      const EnhanceOptions& opts = {}) {
  require_image(y, "enhance");
  if (schedule.steps() == 0) throw ConfigError("enhance: empty inference schedule");
  if (y.dim(0) % 4 || y.dim(1) % 4) throw DimensionError("enhance: image dims must be divisible by 4, got " + to_string(y.shape()));
  if (opts.ground_truth && opts.ground_truth->shape() != y.shape()) throw DimensionError("enhance: ground truth shape mismatch");

  const Tensor<T> cond = hwc_to_nchw<T>(y);
  Tensor<T> x = rng.normal_tensor<T>(cond.shape());
  EnhanceResult result;

  auto snapshot = [&](std::size_t step, double ab, const Tensor<T>& state) {
    if (!opts.record) return;
    TrajectoryPoint p;
    p.step = step;
    p.alpha_bar = ab;
    p.snapshot = nchw_to_hwc(state);
    p.mean_intensity = sum_of<float>(p.snapshot.data()) / static_cast<double>(p.snapshot.size());
    if (opts.ground_truth) {
      double acc = 0.0;
      for (std::size_t i = 0; i < p.snapshot.size(); ++i) {
        const double d = static_cast<double>(p.snapshot[i]) - (*opts.ground_truth)[i];
        acc += d * d;
      }
      p.dist_to_gt = std::sqrt(acc);
    }
    result.trajectory.points.push_back(std::move(p));
  };

  const std::size_t steps = schedule.steps();
  snapshot(steps, schedule.alpha_bar_seq()[steps], x);
  for (std::size_t s = steps; s >= 1; --s) {
    const StepParams row = schedule.row(s);
    const auto c = reverse_coefficients(row);
    const Tensor<T> eps = estimator(cond, x, row.alpha_bar);
    if (eps.shape() != x.shape()) throw DimensionError("enhance: estimator returned wrong shape");
    const bool noisy = s > 1 && !opts.zero_noise;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double z = noisy ? rng.normal() : 0.0;
      x[i] = static_cast<T>(c.c_x * x[i] - c.c_eps * eps[i] + c.sigma * z);
    }
    ++result.steps_run;
    if (s > 1) snapshot(s - 1, schedule.alpha_bar_seq()[s - 1], x);
  }
  for (auto& v : x.data()) v = std::clamp(v, T{0}, T{1});
  result.x0_hat = nchw_to_hwc(x);
  snapshot(0, 1.0, x);
  return result;
}

}  // namespace lldiff
