// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "lldiff/checkpoint.hpp"
#include "lldiff/data.hpp"
#include "lldiff/diffusion.hpp"
#include "lldiff/metrics.hpp"

namespace lldiff {

/// The full reverse process over the model's own training schedule. The short
/// presets start far below the smallest alpha_bar seen in training, which a
/// small model does not extrapolate to.
inline InferenceSchedule training_inference_schedule(const ModelDescriptor& m) {
  return InferenceSchedule::build(m.steps, m.beta_start, m.beta_end);
}

struct EvalOptions {
  std::optional<InferenceSchedule> schedule;  // unset: training_inference_schedule

  bool use_ema = true;
  std::uint64_t seed = 0;
  StructureConfig structure;
  bool zero_noise = false;
};

struct EvaluatedPair {
  Image enhanced;
  TrajectoryRecord trajectory;
};

/// Enhances every low-light image of `ds` with the checkpoint's weights and
/// scores it against the normal-light target. Pair i samples from its own
/// stream, so results do not depend on evaluation order.
inline EvalReport evaluate_checkpoint(const Checkpoint& c, const Dataset& ds, const EvalOptions& opts,
                                      std::vector<EvaluatedPair>* outputs = nullptr) {
  const ParamSet<float>& weights = opts.use_ema && c.ema.size() ? c.ema : c.trunk;
  const auto estimator = make_estimator(weights);
  const InferenceSchedule schedule = opts.schedule ? *opts.schedule : training_inference_schedule(c.model);
  EvalReport report;
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    const auto& pair = ds.pairs[i];
    Rng rng(derive_seed(opts.seed, {3, i}));
    EnhanceOptions eo;
    eo.record = true;
    eo.zero_noise = opts.zero_noise;
    eo.ground_truth = &pair.x0;
    auto res = enhance(estimator, pair.y, schedule, rng, eo);
    EvalRow row;
    row.image_id = i < ds.ids.size() ? ds.ids[i] : pair_id(i);
    row.psnr = psnr(res.x0_hat, pair.x0);
    row.ssim = ssim(res.x0_hat, pair.x0);
    row.curvature = trajectory_curvature(res.trajectory);
    row.spectrum_gap = spectrum_gap(res.x0_hat, pair.x0, opts.structure, derive_seed(opts.seed, {4, i}));
    report.rows.push_back(std::move(row));
    if (outputs) outputs->push_back({std::move(res.x0_hat), std::move(res.trajectory)});
  }
  return report;
}

}  // namespace lldiff
