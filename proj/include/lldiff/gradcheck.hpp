// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "lldiff/tape.hpp"

namespace lldiff {

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // nondifferentiable points (one-sided slopes disagree)
  bool passed = false;
};

struct GradCheckOptions {
  /// Central-difference step; 0 picks a precision-dependent default.
  double step = 0.0;
  /// Entries whose gradient magnitude falls below this fraction of the
  /// largest gradient are compared against that floor instead of themselves.
  /// 0 picks a precision-dependent default (float32 loss values carry only
  /// ~7 significant digits, so small entries drown in rounding noise).
  double relative_floor = 0.0;
  /// Upper bound on perturbed entries per input (evenly strided subset).
  std::size_t max_entries_per_input = 4096;
};

template <typename T>
using ScalarFunction = std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>;

namespace detail {

template <typename T>
std::vector<std::vector<double>> analytic_gradients(const ScalarFunction<T>& fn, const std::vector<Tensor<T>>& inputs) {
  Tape<T> tape;
  std::vector<Var<T>> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  Var<T> out = fn(tape, vars);
  tape.backward(out);
  std::vector<std::vector<double>> g;
  for (const auto& v : vars) {
    const auto gv = tape.grad(v);
    g.emplace_back(gv.begin(), gv.end());
  }
  return g;
}

// Central differences of `fn` in precision U around `inputs`, compared with
// `analytic`. Points whose one-sided slopes disagree at h and at h/8 sit on a
// kink and are excluded.
template <typename U>
GradCheckReport compare_with_differences(std::string name, const std::vector<std::vector<double>>& analytic,
                                         const ScalarFunction<U>& fn, std::vector<Tensor<U>> work, double tolerance,
                                         double h, double rel_floor, std::size_t max_entries) {
  auto eval = [&] {
    Tape<U> tape;
    std::vector<Var<U>> vars;
    for (const auto& t : work) vars.push_back(tape.constant(t));
    return static_cast<double>(fn(tape, vars).value().item());
  };

  double scale = 0.0;
  for (const auto& g : analytic) {
    for (double v : g) scale = std::max(scale, std::abs(v));
  }
  const double floor = std::max(rel_floor * scale, 1e-12);

  GradCheckReport report;
  report.name = std::move(name);
  report.tolerance = tolerance;
  const double f0 = eval();
  for (std::size_t k = 0; k < work.size(); ++k) {
    const std::size_t n = work[k].size();
    const std::size_t stride = std::max<std::size_t>(1, (n + max_entries - 1) / max_entries);
    for (std::size_t i = 0; i < n; i += stride) {
      const U orig = work[k][i];
      auto at = [&](double d) {
        work[k][i] = static_cast<U>(orig + d);
        const double f = eval();
        work[k][i] = orig;
        return f;
      };
      const double fp = at(h), fm = at(-h);
      double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      const double jump = std::abs((fp - f0) / h - (f0 - fm) / h);
      if (jump > 0.5 * std::max(std::abs(numeric), floor)) {
        const double hs = h / 8.0;
        const double fps = at(hs), fms = at(-hs);
        const double jump_small = std::abs((fps - f0) / hs - (f0 - fms) / hs);
        if (jump_small > 0.5 * jump) {
          ++report.excluded;
          continue;
        }
        // A kink within h of the point but not within h/8: the smaller
        // stencil sees a smooth function.
        numeric = (fps - fms) / (2.0 * hs);
      }
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++report.checked;
      report.max_rel_error = std::max(report.max_rel_error, err);
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace detail

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences over every input tensor.
template <typename T>
GradCheckReport grad_check(std::string name, const ScalarFunction<T>& fn, const std::vector<Tensor<T>>& inputs,
                           double tolerance, GradCheckOptions opts = {}) {
  constexpr bool kDouble = std::is_same_v<T, double>;
  const double h = opts.step > 0.0 ? opts.step : (kDouble ? 1e-6 : 1e-2);
  const double rel_floor = opts.relative_floor > 0.0 ? opts.relative_floor : (kDouble ? 1e-4 : 1e-2);
  return detail::compare_with_differences<T>(std::move(name), detail::analytic_gradients(fn, inputs), fn, inputs,
                                             tolerance, h, rel_floor, opts.max_entries_per_input);
}

/// Checks the float32 backward pass of `fn32` against central differences of
/// the same graph built in double (`fn64`) at the same, float-rounded, point.
/// Differencing in float would bury the reference under rounding noise.
inline GradCheckReport grad_check_mixed(std::string name, const ScalarFunction<float>& fn32,
                                        const ScalarFunction<double>& fn64, const std::vector<Tensor<float>>& inputs,
                                        double tolerance, GradCheckOptions opts = {}) {
  const double h = opts.step > 0.0 ? opts.step : 1e-6;
  const double rel_floor = opts.relative_floor > 0.0 ? opts.relative_floor : 1e-4;
  std::vector<Tensor<double>> widened;
  for (const auto& t : inputs) {
    Tensor<double> d(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) d[i] = t[i];
    widened.push_back(std::move(d));
  }
  return detail::compare_with_differences<double>(std::move(name), detail::analytic_gradients(fn32, inputs), fn64,
                                                  std::move(widened), tolerance, h, rel_floor, opts.max_entries_per_input);
}

}  // namespace lldiff
