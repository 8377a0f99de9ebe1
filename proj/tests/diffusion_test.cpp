// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lldiff/data.hpp"
#include "lldiff/diffusion.hpp"
#include "lldiff/gradcheck.hpp"

namespace lldiff {
namespace {

Tensor<double> normal(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_tensor<double>(std::move(s));
}

TEST(ForwardSample, RecoversCleanImageFromTrueNoise) {
  const auto x0 = normal({2, 3, 4, 4}, 1);
  const auto eps = normal({2, 3, 4, 4}, 2);
  for (double ab : {1e-3, 0.25, 0.5, 0.999, 1.0}) {
    const auto xt = forward_sample(x0, ab, eps);
    EXPECT_LT(max_abs_diff(predict_x0(xt, eps, ab), x0), 1e-9 / std::sqrt(ab));
  }
}

TEST(ForwardSample, UnitAlphaBarIsIdentityAndZeroRejected) {
  const auto x0 = normal({1, 3, 4, 4}, 1);
  const auto eps = normal({1, 3, 4, 4}, 2);
  EXPECT_EQ(forward_sample(x0, 1.0, eps), x0);
  EXPECT_THROW(predict_x0(x0, eps, 0.0), NumericalError);
  EXPECT_THROW(forward_sample(x0, 0.0, eps), NumericalError);
}

TEST(ForwardSample, MonteCarloMoments) {
  // Mean sqrt(ab) x0 and variance (1 - ab), per pixel, over many draws.
  const double ab = 0.3;
  Tensor<double> x0({1, 3, 2, 2});
  for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = 0.1 * static_cast<double>(i);
  constexpr int kDraws = 20000;
  std::vector<double> mean(x0.size()), sq(x0.size());
  Rng rng(4);
  for (int d = 0; d < kDraws; ++d) {
    const auto xt = forward_sample(x0, ab, rng.normal_tensor<double>(x0.shape()));
    for (std::size_t i = 0; i < x0.size(); ++i) {
      mean[i] += xt[i] / kDraws;
      sq[i] += xt[i] * xt[i] / kDraws;
    }
  }
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double var = sq[i] - mean[i] * mean[i];
    EXPECT_NEAR(mean[i], std::sqrt(ab) * x0[i], 4 * std::sqrt((1 - ab) / kDraws));
    EXPECT_NEAR(var, 1 - ab, 0.03);
  }
}

TEST(ForwardSample, VarianceOverManyPixels) {
  const double ab = 0.64;
  const Tensor<double> x0({1, 3, 200, 200});
  const auto xt = forward_sample(x0, ab, normal(x0.shape(), 8));
  double acc = 0.0;
  for (double v : xt.data()) acc += v * v;
  EXPECT_NEAR(acc / static_cast<double>(xt.size()) / (1 - ab), 1.0, 0.05);
}

TEST(PredictX0, LinearInNoiseEstimate) {
  const auto xt = normal({1, 3, 4, 4}, 1);
  const auto a = normal({1, 3, 4, 4}, 2);
  const auto b = normal({1, 3, 4, 4}, 3);
  Tensor<double> ab_sum(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) ab_sum[i] = a[i] + b[i];
  const double alpha_bar = 0.37;
  const auto diff_full = predict_x0(xt, ab_sum, alpha_bar);
  const auto base = predict_x0(xt, a, alpha_bar);
  const double k = -std::sqrt(1 - alpha_bar) / std::sqrt(alpha_bar);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(diff_full[i] - base[i], k * b[i], 1e-12);
  EXPECT_EQ(predict_x0(xt, Tensor<double>(xt.shape()), 1.0), xt);
}

TEST(LearnablePrev, ZeroPredictionAndNoOpLimit) {
  const auto x = normal({1, 3, 4, 4}, 1);
  const Tensor<double> zero(x.shape());
  const auto sched = NoiseSchedule::linear(10, 1e-4, 2e-2);
  Tape<double> tape;
  const auto out = learnable_prev(tape.constant(x), tape.constant(zero), 4, sched, &zero).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(out[i], x[i] / std::sqrt(sched.alpha(4)), 1e-14);
  // Tiny beta: the step is numerically a no-op.
  const auto tiny = NoiseSchedule::linear(2, 1e-15, 1e-15);
  const auto e = normal(x.shape(), 2);
  const auto same = learnable_prev(tape.constant(x), tape.constant(e), 2, tiny, &zero).value();
  EXPECT_LT(max_abs_diff(same, x), 1e-6);
}

TEST(LearnablePrev, SquaredNormGradientClosedForm) {
  const auto sched = NoiseSchedule::linear(40, 1e-4, 2e-2);
  const std::size_t t = 25;
  const auto x = normal({1, 3, 4, 4}, 1);
  const auto e = normal({1, 3, 4, 4}, 2);
  Tape<double> tape;
  const auto ev = tape.leaf(e);
  const auto prev = learnable_prev(tape.constant(x), ev, t, sched);
  tape.backward(sum(mul(prev, prev)));
  const auto g = tape.grad(ev);
  const double a = sched.alpha(t), ab = sched.alpha_bar(t);
  const double k = -2.0 * (1 - a) / (std::sqrt(a) * std::sqrt(1 - ab));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g[i], k * prev.value()[i], 1e-12);
}

TEST(LearnablePrev, MatchesClosedFormAndSkipsNoiseAtFirstStep) {
  const auto sched = NoiseSchedule::linear(50, 1e-4, 2e-2);
  const auto x = normal({1, 3, 4, 4}, 1);
  const auto e = normal({1, 3, 4, 4}, 2);
  const auto z = normal({1, 3, 4, 4}, 3);
  for (std::size_t t : {1u, 2u, 50u}) {
    Tape<double> tape;
    const auto out = learnable_prev(tape.constant(x), tape.constant(e), t, sched, &z).value();
    const double a = sched.alpha(t), ab = sched.alpha_bar(t);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double ref = (x[i] - (1 - a) / std::sqrt(1 - ab) * e[i]) / std::sqrt(a);
      if (t > 1) ref += sched.sigma(t) * z[i];
      EXPECT_NEAR(out[i], ref, 1e-12);
    }
  }
  Tape<double> tape;
  EXPECT_THROW(learnable_prev(tape.constant(x), tape.constant(e), 51, sched), IndexError);
}

TEST(LearnablePrev, BatchUsesPerElementTimesteps) {
  const auto sched = NoiseSchedule::linear(20, 1e-4, 2e-2);
  const auto x = normal({2, 3, 4, 4}, 1);
  const auto e = normal({2, 3, 4, 4}, 2);
  const std::size_t ts[] = {3, 17};
  Tape<double> tape;
  const auto out = learnable_prev(tape.constant(x), tape.constant(e), std::span<const std::size_t>(ts), sched).value();
  const std::size_t per = 48;
  for (std::size_t n = 0; n < 2; ++n) {
    const auto c = reverse_coefficients(sched.row(ts[n]));
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) EXPECT_NEAR(out[i], c.c_x * x[i] - c.c_eps * e[i], 1e-12);
  }
}

TEST(LearnablePrev, GradientWrtNoiseEstimate) {
  const auto sched = NoiseSchedule::linear(30, 1e-4, 2e-2);
  const auto x = normal({1, 3, 4, 4}, 1);
  const auto z = normal({1, 3, 4, 4}, 2);
  const auto w = normal({1, 3, 4, 4}, 5);
  const auto report = grad_check<double>(
      "learnable_prev",
      [&](Tape<double>& tape, const std::vector<Var<double>>& in) {
        return sum(mul_const(learnable_prev(in[0], in[1], 12, sched, &z), w));
      },
      {x, normal({1, 3, 4, 4}, 3)}, 1e-6);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

// Estimator that knows the clean image: eps = (x_t - sqrt(ab) x0) / sqrt(1 - ab).
NoiseEstimator<float> planted(const Image& x0, std::size_t* calls = nullptr) {
  const Tensor<float> target = hwc_to_nchw<float>(x0);
  return [target, calls](const Tensor<float>&, const Tensor<float>& x_t, double ab) {
    if (calls) ++*calls;
    Tensor<float> eps(x_t.shape());
    for (std::size_t i = 0; i < eps.size(); ++i) {
      eps[i] = static_cast<float>((x_t[i] - std::sqrt(ab) * target[i]) / std::sqrt(1.0 - ab));
    }
    return eps;
  };
}

TEST(Enhance, PlantedNoiseRecoversCleanImage) {
  const Image x0 = synth_scene(1, 16, 16, 2);
  const Image y = x0;
  const auto sched = InferenceSchedule::build(10, 9e-4, 0.85);
  Rng rng(3);
  EnhanceOptions opts;
  opts.zero_noise = true;
  opts.record = true;
  opts.ground_truth = &x0;
  const auto out = enhance(planted(x0), y, sched, rng, opts);
  EXPECT_LT(max_abs_diff(out.x0_hat, x0), 1e-3);
  const auto& pts = out.trajectory.points;
  ASSERT_EQ(pts.size(), 11u);
  EXPECT_EQ(pts.front().step, 10u);
  EXPECT_EQ(pts.back().step, 0u);
  for (std::size_t i = 1; i < pts.size(); ++i) EXPECT_LT(*pts[i].dist_to_gt, *pts[i - 1].dist_to_gt) << i;
}

TEST(Enhance, PlantedNoiseWithStochasticSteps) {
  // With sigma > 0 the final step is still exact because z = 0 at s = 1.
  const Image x0 = synth_scene(2, 16, 16, 2);
  const auto sched = InferenceSchedule::build(20, 6e-4, 0.88);
  Rng rng(5);
  const auto out = enhance(planted(x0), x0, sched, rng);
  EXPECT_LT(max_abs_diff(out.x0_hat, x0), 1e-3);
}

TEST(Enhance, SingleStepScheduleRunsOnce) {
  const Image x0 = synth_scene(3, 16, 16, 0);
  std::size_t calls = 0;
  Rng rng(1);
  const auto out = enhance(planted(x0, &calls), x0, InferenceSchedule::build(1, 0.3, 0.3), rng);
  EXPECT_EQ(calls, 1u);
  EXPECT_EQ(out.steps_run, 1u);
}

TEST(Enhance, OutputInUnitRangeAndDeterministic) {
  DenoiserConfig cfg;
  cfg.base_channels = 4;
  const auto params = init_denoiser<float>(1, cfg);
  const Image y = synth_scene(4, 16, 16, 2);
  const auto sched = InferenceSchedule::build(5, 1e-3, 0.8);
  Rng a(9), b(9);
  const auto r1 = enhance(make_estimator(params), y, sched, a);
  const auto r2 = enhance(make_estimator(params), y, sched, b);
  EXPECT_EQ(r1.x0_hat, r2.x0_hat);
  for (float v : r1.x0_hat.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  Rng bad(0);
  EXPECT_THROW(enhance(make_estimator(params), Image({10, 16, 3}), sched, bad), DimensionError);
}

TEST(Enhance, TrajectoryCsv) {
  const Image x0 = synth_scene(1, 16, 16, 0);
  Rng rng(2);
  EnhanceOptions opts;
  opts.record = true;
  opts.ground_truth = &x0;
  const auto out = enhance(planted(x0), x0, InferenceSchedule::build(4, 1e-3, 0.5), rng, opts);
  const auto path = (std::filesystem::temp_directory_path() / "lldiff_traj.csv").string();
  out.trajectory.write_csv(path);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "step,alpha_bar,mean_intensity,dist_to_gt");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 5);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace lldiff
