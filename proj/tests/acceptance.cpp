// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. Criteria can be selected by name:
//
//   acceptance [--list] [name...]

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "lldiff/evaluation.hpp"
#include "lldiff/gradient_suite.hpp"
#include "lldiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace lldiff;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;

  // Records a sub-check; the first failure message is kept up front.
  void require(bool ok, const std::string& what) {
    if (ok) return;
    detail = pass ? what : detail + "; " + what;
    pass = false;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path work_root() {
  static const fs::path root = fs::temp_directory_path() / ("lldiff_acceptance_" + std::to_string(getpid()));
  return root;
}

fs::path fresh(const std::string& name) {
  const fs::path p = work_root() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Written to disk and read back, as the command-line pipeline does, so the
// images carry the same 8-bit quantisation.
Dataset synthetic(std::size_t pairs, std::size_t size, std::uint64_t seed) {
  DatasetSpec spec;
  spec.pairs = pairs;
  spec.size = size;
  spec.seed = seed;
  const fs::path dir = fresh("data_" + std::to_string(pairs) + "_" + std::to_string(size) + "_" + std::to_string(seed));
  write_dataset(spec, dir);
  return load_dataset(dir / kManifestName);
}

// The paper's 1e-4 is tuned for millions of iterations; a few thousand need a
// larger step.
constexpr double kDeskLearningRate = 1e-3;

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  std::size_t checks = 0;
  double worst64 = 0.0, worst32 = 0.0;
  for (const auto p : {Precision::kFloat64, Precision::kFloat32}) {
    for (const auto& r : run_gradient_suite(p)) {
      ++checks;
      (p == Precision::kFloat64 ? worst64 : worst32) = std::max(p == Precision::kFloat64 ? worst64 : worst32, r.max_rel_error);
      o.require(r.passed, r.name + " rel err " + fmt("%.2e", r.max_rel_error));
    }
  }
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "suite took " + fmt("%.1f", secs) + " s");
  if (o.pass) {
    o.detail = std::to_string(checks) + " checks, worst rel err " + fmt("%.1e", worst64) + " (f64, tol 1e-4) " + fmt("%.1e", worst32) +
               " (f32, tol 1e-3), " + fmt("%.1f", secs) + " s";
  }
  return o;
}

// Noise estimator that knows the clean image.
NoiseEstimator<float> planted(const Image& x0) {
  const Tensor<float> target = hwc_to_nchw<float>(x0);
  return [target](const Tensor<float>&, const Tensor<float>& x_t, double ab) {
    Tensor<float> eps(x_t.shape());
    for (std::size_t i = 0; i < eps.size(); ++i) {
      eps[i] = static_cast<float>((x_t[i] - std::sqrt(ab) * target[i]) / std::sqrt(1.0 - ab));
    }
    return eps;
  };
}

Outcome diffusion_algebra() {
  Outcome o;
  Rng rng(21);
  double identity = 0.0;
  for (double ab : {0.999, 0.9, 0.5, 0.1, 1e-3}) {
    const auto x0 = rng.normal_tensor<double>({2, 3, 16, 16});
    const auto eps = rng.normal_tensor<double>({2, 3, 16, 16});
    const auto back = predict_x0(forward_sample(x0, ab, eps), eps, ab);
    for (std::size_t i = 0; i < x0.size(); ++i) identity = std::max(identity, std::abs(back[i] - x0[i]));
  }
  o.require(identity < 1e-12, "forward/predict identity error " + fmt("%.2e", identity));

  double oracle = 0.0;
  for (const auto& p : kInferencePresets) {
    if (p.steps != 10) continue;
    const Image x0 = synth_scene(5, 32, 32, 3);
    Rng r(7);
    const auto out = enhance(planted(x0), x0, InferenceSchedule::build(p.steps, p.one_minus_alpha_first, p.one_minus_alpha_last), r);
    for (std::size_t i = 0; i < x0.size(); ++i) oracle = std::max(oracle, static_cast<double>(std::abs(out.x0_hat[i] - x0[i])));
  }
  o.require(oracle < 1e-3, "planted oracle max error " + fmt("%.2e", oracle));
  if (o.pass) o.detail = "identity " + fmt("%.1e", identity) + " (< 1e-12), planted 10-step oracle " + fmt("%.1e", oracle) + " (< 1e-3)";
  return o;
}

Outcome schedule_exactness() {
  Outcome o;
  const TrainConfig cfg;
  const auto train = cfg.schedule();
  o.require(train.steps() == 500 && train.beta(1) == 1e-4 && train.beta(500) == 2e-2, "linear beta endpoints differ from 1e-4 .. 2e-2 over 500 steps");
  for (std::size_t t = 1; t <= train.steps(); ++t) {
    if (train.kappa(t) != train.alpha_bar(t) * train.alpha_bar(t)) {
      o.require(false, "kappa != alpha_bar^2 at t=" + std::to_string(t));
      break;
    }
  }
  const fs::path dir = fresh("schedules");
  for (const auto& p : kInferencePresets) {
    const auto s = InferenceSchedule::build(p.steps, p.one_minus_alpha_first, p.one_minus_alpha_last);
    const auto path = dir / (std::string(p.name) + ".csv");
    s.write_csv(path.string());
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    std::size_t rows = 0;
    while (std::getline(is, line)) {
      ++rows;
      std::size_t t = 0;
      double beta = 0, ab = 0, sigma = 0, kappa = 0;
      if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf", &t, &beta, &ab, &sigma, &kappa) != 5 || t != rows) {
        o.require(false, std::string(p.name) + ": malformed row " + std::to_string(rows));
        break;
      }
      const bool exact = beta == s.one_minus_alpha(t) && ab == s.alpha_bar_seq()[t] && kappa == ab * ab;
      o.require(exact, std::string(p.name) + ": row " + std::to_string(t) + " does not round-trip");
      if (t == 1) o.require(beta == p.one_minus_alpha_first, std::string(p.name) + ": first endpoint");
      if (t == p.steps) o.require(beta == p.one_minus_alpha_last, std::string(p.name) + ": last endpoint");
    }
    o.require(rows == p.steps, std::string(p.name) + ": expected " + std::to_string(p.steps) + " rows");
  }
  if (o.pass) o.detail = "beta 1e-4..2e-2 over T=500, kappa = alpha_bar^2 exactly, presets (20,6e-4,0.88) (10,9e-4,0.85) (10,2e-3,0.84) bit-exact in CSV";
  return o;
}

// Minimises the uncertainty loss over p alone with gradient descent from p = 0.
Outcome uncertainty_stationary_point() {
  Outcome o;
  const std::vector<double> r = {0.5, 2.0, 2.0 * std::exp(1.0)};
  const Tensor<double> eps({r.size()}, r), eps_hat({r.size()}, 0.0);
  Tensor<double> p({r.size()}, 0.0);
  for (int it = 0; it < 2000; ++it) {
    Tape<double> tape;
    const auto pv = tape.leaf(p);
    tape.backward(uncertainty_loss(eps, tape.constant(eps_hat), pv));
    const auto g = tape.grad(pv);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= 0.3 * static_cast<double>(r.size()) * g[i];
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) worst = std::max(worst, std::abs(p[i] - std::log(std::abs(r[i]) / 2.0)));
  o.require(worst < 1e-3, "max |p - ln(|r|/2)| = " + fmt("%.2e", worst));
  if (o.pass) o.detail = "residuals {0.5, 2, 2e}: max |p - ln(|r|/2)| " + fmt("%.1e", worst) + " (< 1e-3)";
  return o;
}

double eval_rank(const std::vector<Tensor<double>>& rec, const std::vector<Tensor<double>>& gt) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& m : rec) vars.push_back(tape.constant(m));
  return rank_loss(vars, gt).value().item();
}

Outcome rank_loss_properties() {
  Outcome o;
  Rng rng(31);
  const auto a = rng.normal_tensor<double>({12, 6}), b = rng.normal_tensor<double>({12, 6});
  const double self = eval_rank({a, b}, {a, b});
  o.require(self == 0.0, "identical inputs give " + fmt("%.2e", self));

  Tensor<double> shuffled(a.shape());
  const std::size_t perm[] = {3, 0, 5, 1, 4, 2};
  for (std::size_t r = 0; r < 12; ++r) {
    for (std::size_t c = 0; c < 6; ++c) shuffled[r * 6 + c] = a[r * 6 + perm[c]];
  }
  const double perm_gap = std::abs(eval_rank({a}, {b}) - eval_rank({shuffled}, {b}));
  o.require(perm_gap < 1e-10, "column permutation changes the loss by " + fmt("%.2e", perm_gap));

  const Tensor<double> d31({2, 2}, std::vector<double>{3, 0, 0, 1}), d21({2, 2}, std::vector<double>{2, 0, 0, 1});
  const double known = eval_rank({d31}, {d21});
  o.require(std::abs(known - 0.5) < 1e-12, "diag(3,1) vs diag(2,1) gives " + fmt("%.17g", known));
  if (o.pass) o.detail = "identical 0, permutation gap " + fmt("%.1e", perm_gap) + ", diag(3,1) vs diag(2,1) = " + fmt("%.15g", known);
  return o;
}

// Calibration run (seed 1): input 7.92 dB, enhanced 20.61 dB, +12.7 dB.
constexpr double kOverfitGainDb = 5.0;

Outcome overfit_smoke() {
  Outcome o;
  const auto t0 = Clock::now();
  const Dataset ds = synthetic(1, 64, 1);
  TrainConfig cfg;
  cfg.base_channels = 16;
  cfg.learning_rate = kDeskLearningRate;
  cfg.pretrain_iters = 5000;
  cfg.train_iters = 5000;
  cfg.seed = 1;
  const auto p1 = pretrain(cfg, ds);
  const auto p2 = train(cfg, ds, p1);
  EvalOptions eo;
  eo.seed = 1;
  const auto rep = evaluate_checkpoint(p2, ds, eo);
  const double secs = seconds_since(t0);
  const double in = psnr(ds.pairs[0].y, ds.pairs[0].x0), out = rep.rows[0].psnr;
  o.detail = "input " + fmt("%.2f", in) + " dB -> enhanced " + fmt("%.2f", out) + " dB (gain " + fmt("%+.2f", out - in) + ", need " +
             fmt("%+.1f", kOverfitGainDb) + "), " + fmt("%.0f", secs) + " s";
  const std::string d = o.detail;
  o.require(out >= in + kOverfitGainDb, d);
  o.require(secs < 900.0, "runtime over 15 minutes");
  return o;
}

struct AblationArm {
  EvalReport report;
  double psnr = 0, curvature = 0, gap = 0;
};

Outcome directional_ablation() {
  Outcome o;
  const Dataset train_set = synthetic(16, 64, 11);
  const Dataset test_set = synthetic(8, 64, 12);
  TrainConfig cfg;
  cfg.learning_rate = kDeskLearningRate;
  cfg.pretrain_iters = 2000;
  cfg.train_iters = 2000;
  cfg.seed = 2;
  const auto pre = pretrain(cfg, train_set);
  const EvalOptions eo;
  auto arm = [&](bool on) {
    TrainConfig c = cfg;
    c.ablation = {on, on, on};
    AblationArm a;
    a.report = evaluate_checkpoint(train(c, train_set, pre), test_set, eo);
    a.psnr = a.report.mean_psnr();
    a.curvature = a.report.mean_curvature();
    a.gap = a.report.mean_spectrum_gap();
    return a;
  };
  const AblationArm full = arm(true), base = arm(false);
  o.detail = "curvature " + fmt("%.4f", full.curvature) + " vs " + fmt("%.4f", base.curvature) + ", spectrum gap " + fmt("%.5f", full.gap) +
             " vs " + fmt("%.5f", base.gap) + ", PSNR " + fmt("%.2f", full.psnr) + " vs " + fmt("%.2f", base.psnr) + " dB (abc vs none)";
  const std::string d = o.detail;
  o.require(full.curvature < base.curvature, "curvature not lower: " + d);
  o.require(full.gap < base.gap, "spectrum gap not lower: " + d);
  o.require(full.psnr >= base.psnr - 0.5, "PSNR more than 0.5 dB below baseline: " + d);
  if (o.pass) o.detail = d;
  return o;
}

// The whole pipeline on disk: dataset, both phases with periodic checkpoints,
// enhancement and the evaluation report.
void pipeline(const fs::path& dir) {
  DatasetSpec spec;
  spec.pairs = 3;
  spec.size = 32;
  spec.seed = 8;
  write_dataset(spec, dir / "data");
  const Dataset ds = load_dataset(dir / "data" / kManifestName);
  TrainConfig cfg;
  cfg.base_channels = 8;
  cfg.patch_size = 16;
  cfg.batch_size = 2;
  cfg.pretrain_iters = 60;
  cfg.train_iters = 40;
  cfg.checkpoint_interval = 20;
  cfg.seed = 9;
  fs::create_directories(dir / "run");
  const auto p1 = pretrain(cfg, ds, TrainIo{dir / "run", {}});
  const auto p2 = train(cfg, ds, p1, TrainIo{dir / "run", {}});
  EvalOptions eo;
  eo.seed = 4;
  std::vector<EvaluatedPair> outs;
  evaluate_checkpoint(p2, ds, eo, &outs).write_csv((dir / "eval.csv").string());
  for (std::size_t i = 0; i < outs.size(); ++i) {
    save_ppm(outs[i].enhanced, (dir / (ds.ids[i] + "_enhanced.ppm")).string());
    outs[i].trajectory.write_csv((dir / (ds.ids[i] + "_trajectory.csv")).string());
  }
}

Outcome determinism() {
  Outcome o;
  const fs::path a = fresh("determinism_a"), b = fresh("determinism_b");
  pipeline(a);
  pipeline(b);
  std::size_t files = 0, ckpts = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    if (e.path().extension() == ".ckpt") ++ckpts;
    const auto rel = fs::relative(e.path(), a);
    o.require(fs::exists(b / rel) && slurp(e.path()) == slurp(b / rel), rel.string() + " differs");
  }
  o.require(ckpts >= 4, "expected periodic and final checkpoints, found " + std::to_string(ckpts));
  if (o.pass) o.detail = std::to_string(files) + " files byte-identical across two runs (" + std::to_string(ckpts) + " checkpoints)";
  return o;
}

struct Criterion {
  const char* name;
  Outcome (*run)();
};

constexpr Criterion kCriteria[] = {
    {"gradient_suite", gradient_suite},
    {"diffusion_algebra", diffusion_algebra},
    {"schedule_exactness", schedule_exactness},
    {"uncertainty_stationary_point", uncertainty_stationary_point},
    {"rank_loss_properties", rank_loss_properties},
    {"overfit_smoke", overfit_smoke},
    {"directional_ablation", directional_ablation},
    {"determinism", determinism},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> only(argv + 1, argv + argc);
  if (!only.empty() && only[0] == "--list") {
    for (const auto& c : kCriteria) std::cout << c.name << '\n';
    return 0;
  }
  for (const auto& name : only) {
    if (std::none_of(std::begin(kCriteria), std::end(kCriteria), [&](const Criterion& c) { return name == c.name; })) {
      std::cerr << "unknown criterion " << name << '\n';
      return 2;
    }
  }
  int failures = 0;
  for (const auto& c : kCriteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << std::endl;
  }
  std::error_code ec;
  fs::remove_all(work_root(), ec);
  return failures == 0 ? 0 : 1;
}
