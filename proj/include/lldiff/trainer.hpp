// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "lldiff/checkpoint.hpp"
#include "lldiff/data.hpp"
#include "lldiff/diffusion.hpp"
#include "lldiff/losses.hpp"
#include "lldiff/optim.hpp"
#include "lldiff/structure.hpp"

namespace lldiff {

/// The three independently switchable ingredients of the second phase.
struct AblationSwitches {
  bool structure_reg = true;   // rank loss on the learnable sample
  bool kappa_schedule = true;  // weight the rank loss by alpha_bar_t^2
  bool uncertainty = true;     // weight the noise loss by the frozen uncertainty map
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double ema_decay = 0.9999;
  bool ema_warmup = true;
  double lambda = 10.0;

  std::size_t steps = 500;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  std::size_t base_channels = 16;

  std::size_t patch_size = 32;
  std::size_t batch_size = 4;
  std::size_t pretrain_iters = 5000;
  std::size_t train_iters = 5000;

  std::size_t block_edge = 4;
  std::size_t clusters = 0;  // 0: max(2, n / 16)
  ClusterMethod cluster_method = ClusterMethod::kKMeans;
  std::size_t kmeans_iters = 50;

  AblationSwitches ablation;
  bool train_noise = true;              // keep sigma_t Z in the learnable sample
  bool frozen_uncertainty_trunk = true; // P_t from the frozen pretrained trunk
  WeightMode weight_mode = WeightMode::kExpClamped;

  std::size_t checkpoint_interval = 0;  // 0: only the final checkpoint
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (!(learning_rate > 0)) fail("learning_rate must be positive");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) fail("adam betas must lie in [0, 1)");
    if (!(adam_eps > 0)) fail("adam_eps must be positive");
    if (!(ema_decay > 0 && ema_decay < 1)) fail("ema_decay must lie in (0, 1)");
    if (!(lambda > 0)) fail("lambda must be positive");
    if (steps == 0) fail("steps must be positive");
    if (batch_size == 0) fail("batch_size must be positive");
    if (patch_size < 8 || patch_size % 4) fail("patch_size must be >= 8 and divisible by 4");
    if (block_edge == 0 || patch_size % block_edge) fail("block_edge must divide patch_size");
    if (kmeans_iters == 0) fail("kmeans_iters must be positive");
    if (ablation.kappa_schedule && !ablation.structure_reg) fail("the kappa schedule switch requires structure_reg");
    DenoiserConfig{base_channels}.validate();
    (void)NoiseSchedule::linear(steps, beta_start, beta_end);
    const std::size_t n = (patch_size / block_edge) * (patch_size / block_edge);
    if (clusters > n) fail("clusters exceeds the number of blocks per patch (" + std::to_string(n) + ")");
  }

  ModelDescriptor model() const {
    return {static_cast<std::uint32_t>(base_channels), static_cast<std::uint32_t>(steps), beta_start, beta_end};
  }
  AdamConfig adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_eps}; }
  StructureConfig structure() const { return {block_edge, clusters, cluster_method, kmeans_iters}; }
  NoiseSchedule schedule() const { return NoiseSchedule::linear(steps, beta_start, beta_end); }
};

struct LogRow {
  std::size_t iter = 0;
  int phase = 1;
  double loss_total = 0, loss_noise = 0, loss_rank = 0;
  double kappa_t = 0;  // batch mean
  double t = 0;        // batch mean
  double lr = 0;
};

/// Where a run writes its log and checkpoints. An empty run_dir writes nothing.
struct TrainIo {
  std::filesystem::path run_dir;
  std::function<void(const LogRow&)> on_log;
};

inline constexpr const char* kTrainLogName = "train_log.csv";

inline std::string phase_checkpoint_name(int phase) { return "phase" + std::to_string(phase) + ".ckpt"; }

namespace detail {

inline Tensor<float> stack_nchw(const std::vector<Image>& imgs) {
  const std::size_t h = imgs.front().dim(0), w = imgs.front().dim(1);
  Tensor<float> out({imgs.size(), 3, h, w});
  for (std::size_t n = 0; n < imgs.size(); ++n) {
    const auto t = hwc_to_nchw<float>(imgs[n]);
    std::copy(t.data().begin(), t.data().end(), out.data().begin() + n * t.size());
  }
  return out;
}

inline ParamSet<float> concat(const ParamSet<float>& a, const ParamSet<float>& b) {
  ParamSet<float> out = a;
  for (std::size_t i = 0; i < b.size(); ++i) out.add(b.names[i], b.tensors[i]);
  return out;
}

struct Sample {
  std::size_t pair;
  CropOrigin origin;
  Image x0, y;
  NoiseSchedule::NoiseLevel level;
};

/// One training batch with all randomness drawn from the iteration stream.
struct Batch {
  std::vector<Sample> samples;
  Tensor<float> x0, y, eps, x_t, z;
  std::vector<double> alpha_bars;
  std::vector<std::size_t> ts;
};

inline Batch draw_batch(const Dataset& ds, const TrainConfig& cfg, const NoiseSchedule& sched, Rng& rng) {
  Batch b;
  std::vector<Image> x0s, ys;
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    Sample s;
    s.pair = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(ds.pairs.size()) - 1));
    const auto crop = crop_patch_pair(ds.pairs[s.pair], cfg.patch_size, rng, &s.origin);
    s.x0 = crop.x0;
    s.y = crop.y;
    s.level = sched.sample_noise_level(rng);
    x0s.push_back(s.x0);
    ys.push_back(s.y);
    b.alpha_bars.push_back(s.level.alpha_bar);
    b.ts.push_back(s.level.t);
    b.samples.push_back(std::move(s));
  }
  b.x0 = stack_nchw(x0s);
  b.y = stack_nchw(ys);
  b.eps = rng.normal_tensor<float>(b.x0.shape());
  b.z = rng.normal_tensor<float>(b.x0.shape());
  b.x_t = Tensor<float>(b.x0.shape());
  const std::size_t per = b.x0.size() / cfg.batch_size;
  for (std::size_t n = 0; n < cfg.batch_size; ++n) {
    const double a = std::sqrt(b.alpha_bars[n]), s = std::sqrt(1.0 - b.alpha_bars[n]);
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) b.x_t[i] = static_cast<float>(a * b.x0[i] + s * b.eps[i]);
  }
  return b;
}

class RunWriter {
 public:
  RunWriter(const TrainIo& io, bool append) : io_(io) {
    if (io_.run_dir.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(io_.run_dir, ec);
    if (ec) throw IoError("cannot create " + io_.run_dir.string() + ": " + ec.message());
    const auto path = io_.run_dir / kTrainLogName;
    const bool fresh = !append || !std::filesystem::exists(path);
    log_.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!log_) throw IoError("cannot open " + path.string());
    if (fresh) log_ << "iter,phase,loss_total,loss_noise,loss_rank,kappa_t,t,lr\n";
  }

  void log(const LogRow& r) {
    if (io_.on_log) io_.on_log(r);
    if (!log_.is_open()) return;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%d,%.8g,%.8g,%.8g,%.8g,%.6g,%.6g\n", r.iter, r.phase, r.loss_total, r.loss_noise,
                  r.loss_rank, r.kappa_t, r.t, r.lr);
    log_ << buf;
  }

  void checkpoint(const Checkpoint& c, bool final) {
    if (io_.run_dir.empty()) return;
    const std::string name = final ? phase_checkpoint_name(static_cast<int>(c.phase))
                                   : "phase" + std::to_string(c.phase) + "_iter" + std::to_string(c.iteration) + ".ckpt";
    const auto path = (io_.run_dir / name).string();
    save_checkpoint(c, path);
    log_.flush();
    last_good_ = path;
  }

  void abort_non_finite(std::size_t iter) const {
    throw NumericalError("non-finite loss at iteration " + std::to_string(iter) + "; last good checkpoint: " +
                         (last_good_.empty() ? std::string("none (initialisation)") : last_good_));
  }

  void set_last_good(std::string p) { last_good_ = std::move(p); }

 private:
  const TrainIo& io_;
  std::ofstream log_;
  std::string last_good_;
};

inline void require_dataset(const Dataset& ds, const TrainConfig& cfg) {
  if (ds.pairs.empty()) throw ConfigError("training needs a non-empty dataset");
  for (const auto& p : ds.pairs) {
    if (p.x0.dim(0) < cfg.patch_size || p.x0.dim(1) < cfg.patch_size) {
      throw DimensionError("dataset image " + to_string(p.x0.shape()) + " is smaller than patch_size " +
                           std::to_string(cfg.patch_size));
    }
  }
}

}  // namespace detail

/// Fresh phase-1 state: initial trunk and head, EMA equal to the trunk.
inline Checkpoint initial_checkpoint(const TrainConfig& cfg) {
  cfg.validate();
  Checkpoint c;
  c.phase = 1;
  c.model = cfg.model();
  const DenoiserConfig dc{cfg.base_channels};
  c.trunk = init_denoiser<float>(cfg.seed, dc);
  c.head = init_uncertainty_head<float>(cfg.seed, dc);
  c.ema = c.trunk;
  c.adam = AdamState<float>::zeros_like(detail::concat(c.trunk, c.head));
  return c;
}

/// Phase 1: joint training of trunk and uncertainty head under the
/// uncertainty objective. `resume` continues an interrupted phase-1 run.
inline Checkpoint pretrain(const TrainConfig& cfg, const Dataset& ds, const TrainIo& io = {}, const Checkpoint* resume = nullptr) {
  cfg.validate();
  detail::require_dataset(ds, cfg);
  Checkpoint c = resume ? *resume : initial_checkpoint(cfg);
  if (resume) {
    if (resume->phase != 1) throw CompatibilityError("resume: checkpoint is not from pretraining");
    require_compatible(*resume, cfg.model(), "resume checkpoint");
  }
  const NoiseSchedule sched = cfg.schedule();
  detail::RunWriter out(io, resume != nullptr);

  for (std::size_t iter = c.iteration + 1; iter <= cfg.pretrain_iters; ++iter) {
    Rng rng(derive_seed(cfg.seed, {1, iter}));
    const auto b = detail::draw_batch(ds, cfg, sched, rng);

    Tape<float> tape;
    BoundParams<float> trunk(tape, c.trunk, true), head(tape, c.head, true);
    const auto fwd = denoiser_forward(trunk, tape.constant(b.y), tape.constant(b.x_t), std::span<const double>(b.alpha_bars));
    const auto p = uncertainty_head_forward(head, fwd.features);
    const auto loss = uncertainty_loss(b.eps, fwd.eps_hat, p);
    const double value = loss.value().item();
    if (!std::isfinite(value)) out.abort_non_finite(iter);
    tape.backward(loss);

    auto grads = trunk.grads();
    for (auto& g : head.grads()) grads.push_back(std::move(g));
    ParamSet<float> joint = detail::concat(c.trunk, c.head);
    adam_update(joint, grads, c.adam, cfg.adam());
    for (std::size_t i = 0; i < c.trunk.size(); ++i) c.trunk.tensors[i] = std::move(joint.tensors[i]);
    for (std::size_t i = 0; i < c.head.size(); ++i) c.head.tensors[i] = std::move(joint.tensors[c.trunk.size() + i]);
    ema_update(c.ema, c.trunk, ema_decay_at(cfg.ema_decay, c.adam.step, cfg.ema_warmup));
    c.iteration = iter;

    LogRow row{iter, 1, value, value, 0.0, 0.0, 0.0, cfg.learning_rate};
    for (std::size_t n = 0; n < b.ts.size(); ++n) row.t += static_cast<double>(b.ts[n]) / static_cast<double>(b.ts.size());
    out.log(row);
    if (cfg.checkpoint_interval && iter % cfg.checkpoint_interval == 0 && iter < cfg.pretrain_iters) out.checkpoint(c, false);
  }
  out.checkpoint(c, true);
  return c;
}

/// Per-step breakdown of the phase-2 objective, exposed for tests.
struct Phase2Loss {
  Var<float> total;
  Var<float> noise;
  Var<float> rank;  // zero constant when the structure term is off
  double mean_kappa = 0.0;
};

using ClusterCache = std::map<std::tuple<std::size_t, std::size_t, std::size_t>, ClusterSet>;

/// Builds the phase-2 objective for one batch on `tape`, with the trunk
/// bound as `theta`. `pretrained` supplies the frozen uncertainty model.
inline Phase2Loss phase2_objective(Tape<float>& tape, const BoundParams<float>& theta, const ParamSet<float>& current_trunk,
                                   const Checkpoint& pretrained, const detail::Batch& b, const TrainConfig& cfg,
                                   const NoiseSchedule& sched, ClusterCache& cache) {
  const auto fwd = denoiser_forward(theta, tape.constant(b.y), tape.constant(b.x_t), std::span<const double>(b.alpha_bars));
  Phase2Loss out;
  if (cfg.ablation.uncertainty) {
    Tape<float> frozen;
    BoundParams<float> ft(frozen, cfg.frozen_uncertainty_trunk ? pretrained.trunk : current_trunk, false);
    BoundParams<float> fh(frozen, pretrained.head, false);
    const auto ffwd = denoiser_forward(ft, frozen.constant(b.y), frozen.constant(b.x_t), std::span<const double>(b.alpha_bars));
    const Tensor<float> p = uncertainty_head_forward(fh, ffwd.features).value();
    out.noise = weighted_noise_loss(b.eps, fwd.eps_hat, p, cfg.lambda, cfg.weight_mode);
  } else {
    out.noise = plain_noise_loss(b.eps, fwd.eps_hat, cfg.lambda);
  }

  out.rank = tape.constant(Tensor<float>::scalar(0.0f));
  if (cfg.ablation.structure_reg) {
    const Var<float> x_prev =
        learnable_prev(tape.constant(b.x_t), fwd.eps_hat, std::span<const std::size_t>(b.ts), sched, cfg.train_noise ? &b.z : nullptr);
    const StructureConfig sc = cfg.structure();
    const float inv_b = 1.0f / static_cast<float>(b.samples.size());
    for (std::size_t n = 0; n < b.samples.size(); ++n) {
      const auto& s = b.samples[n];
      const Patches gt = patchify(s.x0, sc.block);
      const auto key = std::make_tuple(s.pair, s.origin.row, s.origin.col);
      auto it = cache.find(key);
      if (it == cache.end()) {
        it = cache.emplace(key, cluster_blocks(gt, sc, derive_seed(cfg.seed, {s.pair, s.origin.row, s.origin.col}))).first;
      }
      const double kappa = cfg.ablation.kappa_schedule ? sched.kappa(s.level.t) : 1.0;
      out.mean_kappa += kappa / static_cast<double>(b.samples.size());
      const auto r = rank_loss(build_matrices(it->second, x_prev, n), build_matrices<float>(it->second, gt));
      out.rank = add(out.rank, mul(r, static_cast<float>(kappa) * inv_b));
    }
    out.total = add(out.noise, out.rank);
  } else {
    out.total = out.noise;
  }
  return out;
}

/// Phase 2: structure-aware training initialised from a phase-1 checkpoint.
/// The uncertainty head (and the trunk that feeds it) stay frozen.
inline Checkpoint train(const TrainConfig& cfg, const Dataset& ds, const Checkpoint& pretrained, const TrainIo& io = {},
                        const Checkpoint* resume = nullptr) {
  cfg.validate();
  detail::require_dataset(ds, cfg);
  require_compatible(pretrained, cfg.model(), "pretrained checkpoint");
  if (pretrained.head.size() == 0) throw CompatibilityError("pretrained checkpoint has no uncertainty head");

  Checkpoint c;
  if (resume) {
    if (resume->phase != 2) throw CompatibilityError("resume: checkpoint is not from phase 2");
    require_compatible(*resume, cfg.model(), "resume checkpoint");
    c = *resume;
  } else {
    c.phase = 2;
    c.model = cfg.model();
    c.trunk = pretrained.trunk;
    c.head = pretrained.head;
    c.ema = pretrained.trunk;
    c.adam = AdamState<float>::zeros_like(c.trunk);
  }
  const NoiseSchedule sched = cfg.schedule();
  detail::RunWriter out(io, resume != nullptr);
  ClusterCache cache;

  for (std::size_t iter = c.iteration + 1; iter <= cfg.train_iters; ++iter) {
    Rng rng(derive_seed(cfg.seed, {2, iter}));
    const auto b = detail::draw_batch(ds, cfg, sched, rng);

    Tape<float> tape;
    BoundParams<float> theta(tape, c.trunk, true);
    const auto loss = phase2_objective(tape, theta, c.trunk, pretrained, b, cfg, sched, cache);
    const double value = loss.total.value().item();
    if (!std::isfinite(value)) out.abort_non_finite(iter);
    tape.backward(loss.total);
    adam_update(c.trunk, theta.grads(), c.adam, cfg.adam());
    ema_update(c.ema, c.trunk, ema_decay_at(cfg.ema_decay, c.adam.step, cfg.ema_warmup));
    c.iteration = iter;

    LogRow row{iter, 2, value, loss.noise.value().item(), loss.rank.value().item(), loss.mean_kappa, 0.0, cfg.learning_rate};
    for (std::size_t n = 0; n < b.ts.size(); ++n) row.t += static_cast<double>(b.ts[n]) / static_cast<double>(b.ts.size());
    out.log(row);
    if (cfg.checkpoint_interval && iter % cfg.checkpoint_interval == 0 && iter < cfg.train_iters) out.checkpoint(c, false);
  }
  out.checkpoint(c, true);
  return c;
}

}  // namespace lldiff
