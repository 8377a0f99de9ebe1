// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "lldiff/gradcheck.hpp"
#include "lldiff/losses.hpp"
#include "lldiff/rng.hpp"

namespace lldiff {
namespace {

double eval_uncertainty(const Tensor<double>& eps, const Tensor<double>& eps_hat, const Tensor<double>& p) {
  Tape<double> tape;
  return uncertainty_loss(eps, tape.constant(eps_hat), tape.constant(p)).value().item();
}

double eval_weighted(const Tensor<double>& eps, const Tensor<double>& eps_hat, const Tensor<double>& p, double lambda,
                     WeightMode mode = WeightMode::kExpClamped) {
  Tape<double> tape;
  return weighted_noise_loss(eps, tape.constant(eps_hat), p, lambda, mode).value().item();
}

TEST(UncertaintyLoss, StationaryValues) {
  const Tensor<double> zero({2, 3}, 0.0);
  EXPECT_NEAR(eval_uncertainty(Tensor<double>({2, 3}, 2.0), zero, zero), 2.0, 1e-14);
  const double e = std::exp(1.0);
  EXPECT_NEAR(eval_uncertainty(Tensor<double>({2, 3}, -2.0 * e), zero, Tensor<double>({2, 3}, 1.0)), 4.0, 1e-14);
}

TEST(UncertaintyLoss, GradientDescentFindsLogHalfResidual) {
  const double e = std::exp(1.0);
  const std::vector<double> r = {0.5, 2.0, 2.0 * e, -3.0};
  const Tensor<double> eps({r.size()}, r);
  const Tensor<double> eps_hat({r.size()}, 0.0);
  Tensor<double> p({r.size()}, 0.0);
  for (int it = 0; it < 500; ++it) {
    Tape<double> tape;
    const auto pv = tape.leaf(p);
    tape.backward(uncertainty_loss(eps, tape.constant(eps_hat), pv));
    const auto g = tape.grad(pv);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= 0.3 * static_cast<double>(r.size()) * g[i];
  }
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(p[i], std::log(std::abs(r[i]) / 2.0), 1e-3) << r[i];
}

TEST(UncertaintyLoss, ConvexInP) {
  // Second differences in p are positive for a fixed nonzero residual.
  const Tensor<double> eps({1}, 1.3), eps_hat({1}, 0.0);
  for (double p = -3.0; p <= 3.0; p += 0.5) {
    const double h = 1e-3;
    const double f0 = eval_uncertainty(eps, eps_hat, Tensor<double>({1}, p));
    const double fp = eval_uncertainty(eps, eps_hat, Tensor<double>({1}, p + h));
    const double fm = eval_uncertainty(eps, eps_hat, Tensor<double>({1}, p - h));
    EXPECT_GT(fp - 2 * f0 + fm, 0.0);
  }
}

TEST(UncertaintyLoss, GradCheckAndShapeErrors) {
  Rng rng(1);
  const auto eps = rng.normal_tensor<double>({2, 3, 4});
  const auto report = grad_check<double>(
      "uncertainty_loss",
      [&](Tape<double>&, const std::vector<Var<double>>& in) { return uncertainty_loss(eps, in[0], in[1]); },
      {rng.normal_tensor<double>({2, 3, 4}), rng.normal_tensor<double>({2, 3, 4})}, 1e-5);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  EXPECT_THROW(eval_uncertainty(eps, Tensor<double>({2, 3, 5}), Tensor<double>({2, 3, 4})), DimensionError);
}

TEST(WeightedNoiseLoss, UnitWeightsAndLinearity) {
  Rng rng(2);
  const auto eps = rng.normal_tensor<double>({3, 5});
  const auto eps_hat = rng.normal_tensor<double>({3, 5});
  const Tensor<double> p0({3, 5}, 0.0);
  double ref = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) ref += std::abs(eps[i] - eps_hat[i]) / 15.0;
  EXPECT_NEAR(eval_weighted(eps, eps_hat, p0, 10.0), 10.0 * ref, 1e-12);
  EXPECT_EQ(eval_weighted(eps, eps_hat, p0, 2.0), 2.0 * eval_weighted(eps, eps_hat, p0, 1.0));
  EXPECT_EQ(eval_weighted(eps, eps, p0, 1.0), 0.0);
  EXPECT_THROW(eval_weighted(eps, eps_hat, p0, 0.0), ConfigError);
  EXPECT_THROW(eval_weighted(eps, eps_hat, Tensor<double>({5, 3}), 1.0), DimensionError);
}

TEST(WeightedNoiseLoss, WeightDefinitionAndClamp) {
  const Tensor<double> p({4}, std::vector<double>{0.0, std::log(4.0), -10.0, 10.0});
  const auto w = uncertainty_weights(p);
  EXPECT_NEAR(w[1] / w[0], 4.0, 1e-12);
  EXPECT_EQ(w[2], kWeightMin);
  EXPECT_EQ(w[3], kWeightMax);
  EXPECT_EQ(uncertainty_weights(p, WeightMode::kRaw), p);
}

TEST(WeightedNoiseLoss, MonotoneInUncertainty) {
  const Tensor<double> eps({3}, std::vector<double>{0.5, -1.0, 0.2});
  const Tensor<double> eps_hat({3}, 0.0);
  double prev = -1.0;
  for (double q = -2.0; q <= 2.0; q += 0.25) {
    const double v = eval_weighted(eps, eps_hat, Tensor<double>({3}, std::vector<double>{0.0, q, 0.0}), 1.0);
    EXPECT_GT(v, prev);
    prev = v;
  }
}

}  // namespace
}  // namespace lldiff
