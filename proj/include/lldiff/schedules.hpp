// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "lldiff/errors.hpp"
#include "lldiff/rng.hpp"

namespace lldiff {

/// Per-step coefficients consumed by one reverse update.
struct StepParams {
  double alpha = 1.0;
  double alpha_bar = 1.0;
  double sigma = 0.0;
};

namespace detail {

inline double lerp_exact(double a, double b, std::size_t i, std::size_t count) {
  if (count <= 1) return a;
  const double f = static_cast<double>(i) / static_cast<double>(count - 1);
  return a * (1.0 - f) + b * f;  // exact at both endpoints
}

inline void write_schedule_csv(const std::string& path, const std::vector<double>& beta,
                               const std::vector<double>& alpha_bar) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "t,beta,alpha_bar,sigma,kappa\n";
  char line[160];
  for (std::size_t i = 0; i < beta.size(); ++i) {
    const double ab = alpha_bar[i + 1];
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g\n", i + 1, beta[i], ab, std::sqrt(beta[i]),
                  ab * ab);
    os << line;
  }
  if (!os) throw IoError("write failed for " + path);
}

}  // namespace detail

/// Training noise schedule over t = 1..T. Index 0 of alpha_bar holds the
/// clean-signal value 1.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(std::size_t steps, double beta_start, double beta_end) {
    if (steps < 1) throw ConfigError("noise schedule needs T >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
      throw ConfigError("noise schedule requires 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    s.beta_.resize(steps);
    s.alpha_bar_.assign(steps + 1, 1.0);
    for (std::size_t i = 0; i < steps; ++i) {
      s.beta_[i] = detail::lerp_exact(beta_start, beta_end, i, steps);
      s.alpha_bar_[i + 1] = s.alpha_bar_[i] * (1.0 - s.beta_[i]);
    }
    return s;
  }

  std::size_t steps() const noexcept { return beta_.size(); }
  double beta_start() const noexcept { return beta_start_; }
  double beta_end() const noexcept { return beta_end_; }

  double beta(std::size_t t) const { return beta_[check(t) - 1]; }
  double alpha(std::size_t t) const { return 1.0 - beta(t); }
  /// alpha_bar(0) == 1.
  double alpha_bar(std::size_t t) const {
    if (t > steps()) throw IndexError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + "]");
    return alpha_bar_[t];
  }
  double sigma(std::size_t t) const { return std::sqrt(beta(t)); }
  double kappa(std::size_t t) const {
    const double ab = alpha_bar(check(t));
    return ab * ab;
  }

  StepParams row(std::size_t t) const { return {alpha(t), alpha_bar(t), sigma(t)}; }

  struct NoiseLevel {
    std::size_t t;
    double alpha_bar;
  };

  /// t uniform over 1..T, then alpha_bar uniform on [alpha_bar_t, alpha_bar_{t-1}].
  NoiseLevel sample_noise_level(Rng& rng) const {
    const std::size_t t = rng.uniform_int(1, steps());
    const double lo = alpha_bar_[t], hi = alpha_bar_[t - 1];
    return {t, lo + (hi - lo) * rng.uniform()};
  }

  void write_csv(const std::string& path) const { detail::write_schedule_csv(path, beta_, alpha_bar_); }

 private:
  std::size_t check(std::size_t t) const {
    if (t < 1 || t > steps()) {
      throw IndexError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    }
    return t;
  }

  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

/// Reduced-step reverse schedule parameterised by its two 1 - alpha endpoints.
class InferenceSchedule {
 public:
  static InferenceSchedule build(std::size_t steps, double one_minus_alpha_first, double one_minus_alpha_last) {
    if (steps < 1) throw ConfigError("inference schedule needs at least one step");
    if (!(one_minus_alpha_first > 0.0 && one_minus_alpha_first <= one_minus_alpha_last &&
          one_minus_alpha_last < 1.0)) {
      throw ConfigError("inference schedule requires 0 < first <= last < 1");
    }
    InferenceSchedule s;
    s.one_minus_alpha_.resize(steps);
    s.alpha_bar_.assign(steps + 1, 1.0);
    for (std::size_t i = 0; i < steps; ++i) {
      s.one_minus_alpha_[i] = detail::lerp_exact(one_minus_alpha_first, one_minus_alpha_last, i, steps);
      s.alpha_bar_[i + 1] = s.alpha_bar_[i] * (1.0 - s.one_minus_alpha_[i]);
    }
    return s;
  }

  std::size_t steps() const noexcept { return one_minus_alpha_.size(); }
  double one_minus_alpha(std::size_t s) const { return one_minus_alpha_.at(check(s) - 1); }
  const std::vector<double>& alpha_bar_seq() const noexcept { return alpha_bar_; }

  StepParams row(std::size_t s) const {
    const double b = one_minus_alpha(s);
    return {1.0 - b, alpha_bar_[s], std::sqrt(b)};
  }

  void write_csv(const std::string& path) const { detail::write_schedule_csv(path, one_minus_alpha_, alpha_bar_); }

 private:
  std::size_t check(std::size_t s) const {
    if (s < 1 || s > steps()) throw IndexError("inference step " + std::to_string(s) + " out of range");
    return s;
  }

  std::vector<double> one_minus_alpha_;
  std::vector<double> alpha_bar_;
};

struct InferencePreset {
  const char* name;
  std::size_t steps;
  double one_minus_alpha_first;
  double one_minus_alpha_last;
};

/// Reduced-step schedules used for the three LOL benchmarks.
inline constexpr InferencePreset kInferencePresets[] = {
    {"lolv1", 20, 6e-4, 0.88},
    {"lolv2-real", 10, 9e-4, 0.85},
    {"lolv2-synthetic", 10, 2e-3, 0.84},
};

}  // namespace lldiff
