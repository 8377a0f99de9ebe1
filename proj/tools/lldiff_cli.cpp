// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: dataset synthesis, two-phase training, enhancement,
// evaluation, diagnostics and gradient verification.

#include <unistd.h>

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lldiff/evaluation.hpp"
#include "lldiff/gradient_suite.hpp"
#include "lldiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace lldiff;

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kIoFailure = 2, kBadConfig = 3 };

// ---------------------------------------------------------------------------
// Terminal output

struct Style {
  bool color = false;
  std::string paint(const std::string& s, const char* code) const { return color ? "\033[" + std::string(code) + "m" + s + "\033[0m" : s; }
  std::string good(const std::string& s) const { return paint(s, "32"); }
  std::string bad(const std::string& s) const { return paint(s, "31"); }
  std::string warn(const std::string& s) const { return paint(s, "33"); }
};

Style make_style() {
  const char* nc = std::getenv("NO_COLOR");
  return {isatty(STDOUT_FILENO) != 0 && !(nc && *nc)};
}

const Style& style() {
  static const Style s = make_style();
  return s;
}

void warning(const std::string& msg) { std::cerr << style().warn("warning: ") << msg << '\n'; }

// ---------------------------------------------------------------------------
// Settings and the key = value surface

enum Command : unsigned {
  kSynth = 1,
  kPretrain = 2,
  kTrain = 4,
  kEnhance = 8,
  kEval = 16,
  kDiagnose = 32,
  kGradcheck = 64,
  kAll = 127,
};

struct Settings {
  std::uint64_t seed = 0;
  DatasetSpec synth;
  TrainConfig train;
  std::string data;
  std::size_t log_every = 100;
  std::size_t inference_steps = 20;
  double oma_first = 6e-4;
  double oma_last = 0.88;
  std::string preset = "training";
  bool use_ema = true;
  std::size_t eval_pairs = 0;  // 0: all
  std::string precision = "both";
  std::set<std::string> assigned;

  Settings() { train.checkpoint_interval = 1000; }
};

std::string format_value(std::size_t v) { return std::to_string(v); }
std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }
std::string format_value(ClusterMethod m) { return m == ClusterMethod::kKMeans ? "kmeans" : "hierarchical"; }
std::string format_value(WeightMode m) { return m == WeightMode::kExpClamped ? "exp-clamped" : "raw"; }
std::string format_value(const AblationSwitches& a) {
  std::string s;
  if (a.structure_reg) s += 'a';
  if (a.kappa_schedule) s += 'b';
  if (a.uncertainty) s += 'c';
  return s.empty() ? "none" : s;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const std::string& want) {
  throw ConfigError(key + ": cannot parse '" + v + "' as " + want);
}

template <typename V>
V parse_value(const std::string& key, const std::string& v);

template <>
std::size_t parse_value<std::size_t>(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
  return out;
}

template <>
double parse_value<double>(const std::string& key, const std::string& v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty() || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

template <>
bool parse_value<bool>(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

template <>
std::string parse_value<std::string>(const std::string&, const std::string& v) {
  return v;
}

template <>
ClusterMethod parse_value<ClusterMethod>(const std::string& key, const std::string& v) {
  if (v == "kmeans") return ClusterMethod::kKMeans;
  if (v == "hierarchical") return ClusterMethod::kHierarchical;
  bad_value(key, v, "kmeans or hierarchical");
}

template <>
WeightMode parse_value<WeightMode>(const std::string& key, const std::string& v) {
  if (v == "exp-clamped") return WeightMode::kExpClamped;
  if (v == "raw") return WeightMode::kRaw;
  bad_value(key, v, "exp-clamped or raw");
}

// Enabled phase-2 switches by their table letters: a = structure
// regularisation, b = kappa schedule, c = uncertainty weighting.
template <>
AblationSwitches parse_value<AblationSwitches>(const std::string& key, const std::string& v) {
  AblationSwitches s{false, false, false};
  if (v == "none") return s;
  if (v.empty()) bad_value(key, v, "a subset of 'abc' or 'none'");
  for (char ch : v) {
    bool* flag = ch == 'a' ? &s.structure_reg : ch == 'b' ? &s.kappa_schedule : ch == 'c' ? &s.uncertainty : nullptr;
    if (!flag || *flag) bad_value(key, v, "a subset of 'abc' or 'none'");
    *flag = true;
  }
  return s;
}

struct Key {
  std::string name;
  unsigned commands;
  std::string help;
  std::string flag;  // command-line spelling
  std::function<void(Settings&, const std::string&)> set;
  std::function<std::string(const Settings&)> get;
};

template <typename A>
Key key(const char* name, unsigned commands, const char* help, A access, const char* flag = nullptr) {
  using V = std::remove_cvref_t<decltype(access(std::declval<Settings&>()))>;
  std::string f = flag ? flag : "--" + std::string(name);
  std::replace(f.begin(), f.end(), '_', '-');
  return {name, commands, help, f,
          [access, n = std::string(name)](Settings& s, const std::string& v) { access(s) = parse_value<V>(n, v); },
          [access](const Settings& s) { return format_value(access(s)); }};
}

const std::vector<Key>& keys() {
  constexpr unsigned kFit = kPretrain | kTrain;
  constexpr unsigned kScore = kEval | kDiagnose;
  constexpr unsigned kInfer = kEnhance | kScore;
  static const std::vector<Key> table = {
      key("seed", kAll, "seed for every stochastic choice", [](auto& s) -> auto& { return s.seed; }),
      key("pairs", kSynth, "number of image pairs", [](auto& s) -> auto& { return s.synth.pairs; }),
      key("size", kSynth, "image edge in pixels (divisible by 4)", [](auto& s) -> auto& { return s.synth.size; }),
      key("motifs", kSynth, "repeated motifs per scene", [](auto& s) -> auto& { return s.synth.motif_count; }),
      key("illum_min", kSynth, "darkest illumination factor", [](auto& s) -> auto& { return s.synth.degradation.illum_min; }),
      key("illum_max", kSynth, "brightest illumination factor", [](auto& s) -> auto& { return s.synth.degradation.illum_max; }),
      key("illum_smoothness", kSynth, "illumination blur radius", [](auto& s) -> auto& { return s.synth.degradation.illum_smoothness; }),
      key("noise_sigma", kSynth, "sensor noise std", [](auto& s) -> auto& { return s.synth.degradation.noise_sigma; }),
      key("data", kFit | kScore, "dataset manifest or directory", [](auto& s) -> auto& { return s.data; }),
      key("learning_rate", kFit, "Adam step size", [](auto& s) -> auto& { return s.train.learning_rate; }),
      key("adam_beta1", kFit, "Adam beta1", [](auto& s) -> auto& { return s.train.adam_beta1; }),
      key("adam_beta2", kFit, "Adam beta2", [](auto& s) -> auto& { return s.train.adam_beta2; }),
      key("adam_eps", kFit, "Adam epsilon", [](auto& s) -> auto& { return s.train.adam_eps; }),
      key("ema_decay", kFit, "EMA decay", [](auto& s) -> auto& { return s.train.ema_decay; }),
      key("ema_warmup", kFit, "ramp the EMA decay up over early updates", [](auto& s) -> auto& { return s.train.ema_warmup; }),
      key("lambda", kFit, "noise-loss weight", [](auto& s) -> auto& { return s.train.lambda; }),
      key("diffusion_steps", kFit, "training schedule length T", [](auto& s) -> auto& { return s.train.steps; }),
      key("beta_start", kFit, "first beta of the linear schedule", [](auto& s) -> auto& { return s.train.beta_start; }),
      key("beta_end", kFit, "last beta of the linear schedule", [](auto& s) -> auto& { return s.train.beta_end; }),
      key("base_channels", kFit, "U-Net width", [](auto& s) -> auto& { return s.train.base_channels; }),
      key("patch_size", kFit, "training crop edge", [](auto& s) -> auto& { return s.train.patch_size; }),
      key("batch_size", kFit, "crops per iteration", [](auto& s) -> auto& { return s.train.batch_size; }),
      key("pretrain_iters", kPretrain, "phase-1 iterations", [](auto& s) -> auto& { return s.train.pretrain_iters; }),
      key("train_iters", kTrain, "phase-2 iterations", [](auto& s) -> auto& { return s.train.train_iters; }),
      key("block_edge", kTrain | kScore, "block edge for patch clustering", [](auto& s) -> auto& { return s.train.block_edge; }),
      key("clusters", kTrain | kScore, "clusters per image (0: automatic)", [](auto& s) -> auto& { return s.train.clusters; }),
      key("cluster_method", kTrain | kScore, "kmeans or hierarchical", [](auto& s) -> auto& { return s.train.cluster_method; }),
      key("kmeans_iters", kTrain | kScore, "Lloyd iteration cap", [](auto& s) -> auto& { return s.train.kmeans_iters; }),
      key("ablation", kTrain, "enabled switches: subset of abc, or none", [](auto& s) -> auto& { return s.train.ablation; }),
      key("train_noise", kTrain, "keep sigma*z in the learnable sample", [](auto& s) -> auto& { return s.train.train_noise; }),
      key("frozen_uncertainty_trunk", kTrain, "take P from the pretrained trunk", [](auto& s) -> auto& { return s.train.frozen_uncertainty_trunk; }),
      key("weight_mode", kTrain, "exp-clamped or raw", [](auto& s) -> auto& { return s.train.weight_mode; }),
      key("checkpoint_interval", kFit, "iterations between checkpoints (0: final only)", [](auto& s) -> auto& { return s.train.checkpoint_interval; }),
      key("log_every", kFit, "iterations between progress lines", [](auto& s) -> auto& { return s.log_every; }),
      key("inference_steps", kInfer, "reverse steps", [](auto& s) -> auto& { return s.inference_steps; }, "--steps"),
      key("oma_first", kInfer, "first 1 - alpha of the inference schedule", [](auto& s) -> auto& { return s.oma_first; }),
      key("oma_last", kInfer, "last 1 - alpha of the inference schedule", [](auto& s) -> auto& { return s.oma_last; }),
      key("preset", kInfer, "training (full reverse process), lolv1, lolv2-real or lolv2-synthetic", [](auto& s) -> auto& { return s.preset; }),
      key("use_ema", kInfer, "sample with the EMA weights", [](auto& s) -> auto& { return s.use_ema; }),
      key("eval_pairs", kScore, "pairs to score (0: all)", [](auto& s) -> auto& { return s.eval_pairs; }),
      key("precision", kGradcheck, "f64, f32 or both", [](auto& s) -> auto& { return s.precision; }),
  };
  return table;
}

const Key* find_key(const std::string& name) {
  for (const auto& k : keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Line-based `key = value` with `#` comments. Keys meant for other commands
// are accepted so one file can describe a whole experiment.
void apply_config_file(Settings& s, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::set<std::string> seen;
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    const auto hash = line.find('#');
    line = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = path + ":" + std::to_string(n);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string k = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
    const Key* def = find_key(k);
    if (!def) throw ConfigError(where + ": unknown key '" + k + "'");
    if (!seen.insert(k).second) throw ConfigError(where + ": key '" + k + "' given twice");
    try {
      def->set(s, v);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    s.assigned.insert(k);
  }
}

std::string resolved_text(const Settings& s, unsigned cmd, const std::string& name) {
  std::string out = "# lldiff " + name + ", resolved configuration\n";
  for (const auto& k : keys()) {
    if (k.commands & cmd) out += k.name + " = " + k.get(s) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run directories

class RunDir {
 public:
  RunDir(fs::path dir, const std::string& config_text) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create run directory " + dir_.string() + ": " + ec.message());
    lock_ = dir_ / ".lock";
    std::FILE* f = std::fopen(lock_.c_str(), "wx");
    if (!f) throw IoError("run directory " + dir_.string() + " is in use by another command (remove " + lock_.string() + " if stale)");
    std::fclose(f);
    std::ofstream os(dir_ / "config.txt", std::ios::trunc);
    os << config_text;
    if (!os) throw IoError("cannot write " + (dir_ / "config.txt").string());
  }
  ~RunDir() {
    std::error_code ec;
    fs::remove(lock_, ec);
  }
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  const fs::path& path() const { return dir_; }

 private:
  fs::path dir_;
  fs::path lock_;
};

fs::path auto_run_dir(const fs::path& root, const std::string& cmd, const std::string& config_text) {
  const auto digest = sha256(std::span(reinterpret_cast<const std::uint8_t*>(config_text.data()), config_text.size()));
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const std::string base = std::string(stamp) + "-" + cmd + "-" + to_hex(digest).substr(0, 8);
  fs::path p = root / base;
  for (int i = 2; fs::exists(p); ++i) p = root / (base + "-" + std::to_string(i));
  return p;
}

// ---------------------------------------------------------------------------
// Shared loaders

fs::path manifest_path(const std::string& data) {
  if (data.empty()) throw ConfigError("data: a dataset manifest or directory is required");
  const fs::path p(data);
  return fs::is_directory(p) ? p / kManifestName : p;
}

Dataset load_limited(const std::string& data, std::size_t limit) {
  Dataset ds = load_dataset(manifest_path(data));
  if (limit && limit < ds.pairs.size()) {
    ds.pairs.resize(limit);
    ds.ids.resize(limit);
  }
  return ds;
}

// Missing, unreadable and mismatched checkpoints are all configuration
// problems from the caller's point of view.
Checkpoint load_model(const std::string& path, const std::string& role) {
  if (path.empty()) throw ConfigError(role + ": no checkpoint given");
  try {
    return load_checkpoint(path);
  } catch (const IoError& e) {
    throw CompatibilityError(role + ": " + e.what());
  }
}

void require_matching(const Checkpoint& c, const ModelDescriptor& expected, const std::string& role) {
  try {
    require_compatible(c, expected, role);
  } catch (const CompatibilityError&) {
    std::cerr << role << " does not match the configured model; tensor manifest diff (checkpoint | config):\n";
    for (const auto& line : checkpoint_manifest_diff(c, expected)) std::cerr << "  " << line << '\n';
    throw;
  }
}

// Explicit steps/endpoints win; otherwise a named preset, where "training"
// (the default) means the checkpoint's own schedule and is returned unset.
std::optional<InferenceSchedule> inference_schedule(const Settings& s) {
  bool custom = false;
  for (const char* k : {"inference_steps", "oma_first", "oma_last"}) {
    if (!s.assigned.count(k)) continue;
    if (s.assigned.count("preset")) throw ConfigError(std::string("preset: cannot be combined with ") + k);
    custom = true;
  }
  if (custom) return InferenceSchedule::build(s.inference_steps, s.oma_first, s.oma_last);
  if (s.preset == "training") return std::nullopt;
  for (const auto& p : kInferencePresets) {
    if (s.preset == p.name) return InferenceSchedule::build(p.steps, p.one_minus_alpha_first, p.one_minus_alpha_last);
  }
  throw ConfigError("preset: unknown schedule '" + s.preset + "' (training, lolv1, lolv2-real, lolv2-synthetic)");
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

std::vector<fs::path> collect_ppms(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file() && e.path().extension() == ".ppm") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(p);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands. Each resolves and validates everything it needs before the run
// directory is created.

struct Common {
  std::string config;
  std::string out;
  std::string runs_root = "runs";
  std::map<std::string, std::string> flags;
  CLI::App* app = nullptr;
};

Settings resolve(const Common& c, unsigned cmd) {
  Settings s;
  if (!c.config.empty()) apply_config_file(s, c.config);
  for (const auto& [name, value] : c.flags) {
    if (c.app->get_option(find_key(name)->flag)->count() == 0) continue;
    try {
      find_key(name)->set(s, value);
    } catch (const ConfigError& e) {
      throw ConfigError(find_key(name)->flag + ": " + e.what());
    }
    s.assigned.insert(name);
  }
  s.synth.seed = s.seed;
  s.train.seed = s.seed;
  (void)cmd;
  return s;
}

fs::path choose_dir(const Common& c, const std::string& cmd, const std::string& text, const std::string& fallback = {}) {
  if (!c.out.empty()) return c.out;
  if (!fallback.empty()) return fallback;
  return auto_run_dir(c.runs_root, cmd, text);
}

int cmd_synth(const Common& c) {
  const Settings s = resolve(c, kSynth);
  s.synth.validate();
  const std::string text = resolved_text(s, kSynth, "synth");
  RunDir run(choose_dir(c, "synth", text), text);
  const auto records = write_dataset(s.synth, run.path());
  std::cout << "wrote " << records.size() << " pairs to " << run.path().string() << '\n';
  return kOk;
}

LogRow summarize_tail(const std::vector<LogRow>& rows, std::size_t window) {
  LogRow m;
  const std::size_t n = std::min(window, rows.size());
  for (std::size_t i = rows.size() - n; i < rows.size(); ++i) {
    m.loss_total += rows[i].loss_total / static_cast<double>(n);
    m.loss_noise += rows[i].loss_noise / static_cast<double>(n);
    m.loss_rank += rows[i].loss_rank / static_cast<double>(n);
  }
  return m;
}

int cmd_fit(const Common& c, bool phase2, const std::string& pretrained_path, const std::string& resume_path) {
  const unsigned cmd = phase2 ? kTrain : kPretrain;
  const char* name = phase2 ? "train" : "pretrain";
  const Settings s = resolve(c, cmd);
  s.train.validate();
  if (phase2 && pretrained_path.empty()) {
    throw ConfigError("train requires --pretrained: phase 2 starts from a phase-1 checkpoint");
  }
  const Dataset ds = load_dataset(manifest_path(s.data));
  detail::require_dataset(ds, s.train);
  std::optional<Checkpoint> pretrained, resume;
  if (phase2) {
    pretrained = load_model(pretrained_path, "pretrained checkpoint");
    require_matching(*pretrained, s.train.model(), "pretrained checkpoint");
  }
  if (!resume_path.empty()) {
    resume = load_model(resume_path, "resume checkpoint");
    require_matching(*resume, s.train.model(), "resume checkpoint");
    if (resume->phase != (phase2 ? 2u : 1u)) throw CompatibilityError("resume checkpoint is from phase " + std::to_string(resume->phase));
  }

  const std::string text = resolved_text(s, cmd, name);
  const std::string fallback = resume_path.empty() ? std::string() : fs::path(resume_path).parent_path().string();
  RunDir run(choose_dir(c, name, text, fallback.empty() && !resume_path.empty() ? "." : fallback), text);

  std::vector<LogRow> rows;
  const std::size_t total = phase2 ? s.train.train_iters : s.train.pretrain_iters;
  TrainIo io{run.path(), [&](const LogRow& r) {
               rows.push_back(r);
               if (s.log_every && (r.iter % s.log_every == 0 || r.iter == total)) {
                 std::printf("%s iter %zu/%zu loss %.6g", name, r.iter, total, r.loss_total);
                 if (phase2) std::printf(" (noise %.6g, rank %.6g)", r.loss_noise, r.loss_rank);
                 std::printf("\n");
                 std::fflush(stdout);
               }
             }};
  const Checkpoint out = phase2 ? train(s.train, ds, *pretrained, io, resume ? &*resume : nullptr)
                                : pretrain(s.train, ds, io, resume ? &*resume : nullptr);
  const auto ckpt = run.path() / phase_checkpoint_name(phase2 ? 2 : 1);
  if (rows.empty()) {
    std::cout << name << ": nothing to do, already at iteration " << out.iteration << '\n';
  } else {
    const LogRow m = summarize_tail(rows, 100);
    std::cout << name << " finished at iteration " << out.iteration << "; mean loss over the last " << std::min<std::size_t>(100, rows.size())
              << " iterations " << m.loss_total;
    if (phase2) std::cout << " (noise " << m.loss_noise << ", rank " << m.loss_rank << ")";
    std::cout << '\n';
  }
  std::cout << "checkpoint: " << ckpt.string() << '\n';
  return kOk;
}

int cmd_enhance(const Common& c, const std::string& checkpoint, const std::vector<std::string>& inputs, bool record,
                const std::string& gt_dir) {
  const Settings s = resolve(c, kEnhance);
  const auto chosen = inference_schedule(s);
  if (inputs.empty()) throw ConfigError("enhance: no input images given");
  const Checkpoint ck = load_model(checkpoint, "checkpoint");
  require_matching(ck, ck.model, "checkpoint");
  const InferenceSchedule sched = chosen ? *chosen : training_inference_schedule(ck.model);
  const auto files = collect_ppms(inputs);
  if (files.empty()) throw ConfigError("enhance: no .ppm files found in the inputs");
  std::set<std::string> stems;
  for (const auto& f : files) {
    if (!stems.insert(f.stem().string()).second) throw ConfigError("enhance: two inputs share the name " + f.stem().string());
  }

  const std::string text = resolved_text(s, kEnhance, "enhance");
  RunDir run(choose_dir(c, "enhance", text), text);
  for (const auto& f : files) {
    if (fs::exists(run.path() / f.filename()) && fs::equivalent(run.path() / f.filename(), f)) {
      throw ConfigError("enhance: output would overwrite input " + f.string());
    }
  }
  sched.write_csv((run.path() / "inference_schedule.csv").string());
  const ParamSet<float>& weights = s.use_ema && ck.ema.size() ? ck.ema : ck.trunk;
  const auto estimator = make_estimator(weights);

  std::size_t ok = 0;
  std::string summary = "image_id,curvature\n";
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto& f = files[i];
    try {
      const Image y = load_ppm(f.string());
      std::optional<Image> gt;
      if (!gt_dir.empty()) gt = load_ppm((fs::path(gt_dir) / f.filename()).string());
      Rng rng(derive_seed(s.seed, {3, i}));
      EnhanceOptions eo;
      eo.record = record;
      eo.ground_truth = gt ? &*gt : nullptr;
      const auto res = enhance(estimator, y, sched, rng, eo);
      save_ppm(res.x0_hat, (run.path() / (f.stem().string() + ".ppm")).string());
      if (record) {
        res.trajectory.write_csv((run.path() / (f.stem().string() + "_trajectory.csv")).string());
        const auto k = trajectory_curvature(res.trajectory);
        summary += f.stem().string() + "," + (k ? format_value(*k) : std::string()) + "\n";
      }
      ++ok;
    } catch (const std::exception& e) {
      warning("skipping " + f.string() + ": " + e.what());
    }
  }
  if (record) write_text(run.path() / "trajectory_summary.csv", summary);
  std::cout << "enhanced " << ok << " of " << files.size() << " images into " << run.path().string() << '\n';
  if (ok == 0) {
    std::cerr << style().bad("error: ") << "every input failed\n";
    return kIoFailure;
  }
  return kOk;
}

std::map<std::string, fs::path> ppms_by_name(const std::string& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) throw ConfigError(dir + " is not a directory");
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") out[e.path().filename().string()] = e.path();
  }
  return out;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& pred_dir, const std::string& gt_dir) {
  const Settings s = resolve(c, kEval);
  const bool image_sets = !pred_dir.empty() || !gt_dir.empty();
  if (image_sets && (pred_dir.empty() || gt_dir.empty())) throw ConfigError("eval: --pred and --gt go together");
  if (image_sets == !checkpoint.empty()) throw ConfigError("eval: give either --checkpoint (with data) or --pred and --gt");

  EvalReport report;
  std::vector<EvaluatedPair> outputs;
  std::vector<std::string> ids;
  if (image_sets) {
    const auto pred = ppms_by_name(pred_dir), gt = ppms_by_name(gt_dir);
    std::vector<std::pair<fs::path, fs::path>> matched;
    for (const auto& [name, p] : gt) {
      const auto it = pred.find(name);
      if (it == pred.end()) {
        warning("no prediction for " + name);
      } else {
        matched.emplace_back(it->second, p);
      }
    }
    if (matched.empty()) throw ConfigError("eval: no file names in common between " + pred_dir + " and " + gt_dir);
    for (const auto& [p, g] : matched) {
      const Image a = load_ppm(p.string());
      const Image b = load_ppm(g.string());
      report.rows.push_back({p.stem().string(), psnr(a, b), ssim(a, b), std::nullopt, std::nullopt});
    }
  } else {
    const Dataset ds = load_limited(s.data, s.eval_pairs);
    const Checkpoint ck = load_model(checkpoint, "checkpoint");
    require_matching(ck, ck.model, "checkpoint");
    EvalOptions eo{inference_schedule(s), s.use_ema, s.seed, s.train.structure()};
    report = evaluate_checkpoint(ck, ds, eo, &outputs);
    ids = ds.ids;
  }

  const std::string text = resolved_text(s, kEval, "eval");
  RunDir run(choose_dir(c, "eval", text), text);
  report.write_csv((run.path() / "eval.csv").string());
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    save_ppm(outputs[i].enhanced, (run.path() / (ids[i] + "_enhanced.ppm")).string());
  }
  std::cout << "images " << report.rows.size() << "  mean PSNR " << fixed(report.mean_psnr(), 3) << " dB  mean SSIM "
            << fixed(report.mean_ssim(), 4);
  if (!image_sets) {
    std::cout << "  mean curvature " << fixed(report.mean_curvature(), 4) << "  mean spectrum gap "
              << fixed(report.mean_spectrum_gap(), 5);
  }
  std::cout << "\nreport: " << (run.path() / "eval.csv").string() << '\n';
  return kOk;
}

struct Labelled {
  std::string label;
  Checkpoint ck;
};

std::vector<Labelled> load_compared(const std::string& checkpoint, const std::vector<std::string>& compare) {
  std::vector<std::string> paths = compare;
  if (!checkpoint.empty()) paths.insert(paths.begin(), checkpoint);
  if (paths.empty()) throw ConfigError("diagnose: give --checkpoint or --compare A B");
  std::vector<Labelled> out;
  std::set<std::string> used;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const fs::path p(paths[i]);
    std::string label = p.stem().string();
    if (used.count(label)) label = p.parent_path().filename().string() + "_" + label;
    if (used.count(label)) label += "_" + std::to_string(i);
    used.insert(label);
    Checkpoint ck = load_model(paths[i], "checkpoint " + paths[i]);
    require_matching(ck, ck.model, "checkpoint " + paths[i]);
    out.push_back({label, std::move(ck)});
  }
  return out;
}

int cmd_diagnose(const Common& c, const std::string& what, const std::string& checkpoint, const std::vector<std::string>& compare) {
  const Settings s = resolve(c, kDiagnose);
  const auto sched = inference_schedule(s);
  const auto models = load_compared(checkpoint, compare);
  const Dataset ds = load_limited(s.data, s.eval_pairs);
  const EvalOptions eo{sched, s.use_ema, s.seed, s.train.structure()};
  const std::string text = resolved_text(s, kDiagnose, "diagnose-" + what);
  RunDir run(choose_dir(c, "diagnose-" + what, text), text);

  std::vector<PlotSeries> series;
  if (what == "trajectory") {
    std::string table = "label,image_id,curvature\n";
    for (const auto& m : models) {
      std::vector<EvaluatedPair> outs;
      const EvalReport rep = evaluate_checkpoint(m.ck, ds, eo, &outs);
      for (const auto& r : rep.rows) table += m.label + "," + r.image_id + "," + (r.curvature ? format_value(*r.curvature) : "") + "\n";
      // Fig. 1 style trace: per-step means over the images.
      const std::size_t steps = outs.front().trajectory.points.size();
      std::string trace = "step,alpha_bar,mean_intensity,dist_to_gt\n";
      PlotSeries ps;
      for (std::size_t k = 0; k < steps; ++k) {
        double mi = 0, dg = 0;
        for (const auto& o : outs) {
          mi += o.trajectory.points[k].mean_intensity / static_cast<double>(outs.size());
          dg += o.trajectory.points[k].dist_to_gt.value_or(0.0) / static_cast<double>(outs.size());
        }
        const auto& p = outs.front().trajectory.points[k];
        trace += std::to_string(p.step) + "," + format_value(p.alpha_bar) + "," + format_value(mi) + "," + format_value(dg) + "\n";
        ps.points.emplace_back(static_cast<double>(k), dg);
      }
      write_text(run.path() / ("trajectory_" + m.label + ".csv"), trace);
      ps.label = m.label + " (curvature " + fixed(rep.mean_curvature(), 3) + ")";
      series.push_back(std::move(ps));
      std::cout << m.label << ": mean curvature " << fixed(rep.mean_curvature(), 4) << " over " << rep.rows.size() << " images\n";
    }
    write_text(run.path() / "curvature.csv", table);
    emit_plot(series, (run.path() / "trajectory.svg").string(), {"Reverse trajectories", "reverse step", "distance to ground truth"});
  } else {
    std::string gaps = "label,image_id,spectrum_gap\n";
    std::vector<double> gt_curve;
    for (const auto& m : models) {
      std::vector<EvaluatedPair> outs;
      const EvalReport rep = evaluate_checkpoint(m.ck, ds, eo, &outs);
      std::string table = "image_id,cluster_id,rank_index,sigma_rec,sigma_gt\n";
      for (std::size_t i = 0; i < outs.size(); ++i) {
        const auto sp = spectrum_pair(outs[i].enhanced, ds.pairs[i].x0, eo.structure, derive_seed(s.seed, {4, i}));
        for (std::size_t j = 0; j < sp.rec.size(); ++j) {
          for (std::size_t r = 0; r < sp.rec[j].size(); ++r) {
            table += ds.ids[i] + "," + std::to_string(j) + "," + std::to_string(r) + "," + format_value(sp.rec[j][r]) + "," +
                     format_value(sp.gt[j][r]) + "\n";
          }
        }
        gaps += m.label + "," + ds.ids[i] + "," + format_value(*rep.rows[i].spectrum_gap) + "\n";
        if (i != 0) continue;
        // Plot the first image: spectra averaged over clusters per rank index.
        auto mean_curve = [](const std::vector<std::vector<double>>& specs) {
          std::vector<double> sum, count;
          for (const auto& sv : specs) {
            if (sv.size() > sum.size()) sum.resize(sv.size()), count.resize(sv.size());
            for (std::size_t r = 0; r < sv.size(); ++r) sum[r] += sv[r], count[r] += 1;
          }
          for (std::size_t r = 0; r < sum.size(); ++r) sum[r] /= count[r];
          return sum;
        };
        PlotSeries ps{m.label + " (gap " + fixed(rep.mean_spectrum_gap(), 4) + ")", {}};
        const auto rc = mean_curve(sp.rec);
        for (std::size_t r = 0; r < rc.size(); ++r) ps.points.emplace_back(static_cast<double>(r), rc[r]);
        series.push_back(std::move(ps));
        if (gt_curve.empty()) gt_curve = mean_curve(sp.gt);
      }
      write_text(run.path() / ("spectrum_" + m.label + ".csv"), table);
      std::cout << m.label << ": mean spectrum gap " << fixed(rep.mean_spectrum_gap(), 5) << " over " << rep.rows.size() << " images\n";
    }
    PlotSeries gt{"ground truth", {}};
    for (std::size_t r = 0; r < gt_curve.size(); ++r) gt.points.emplace_back(static_cast<double>(r), gt_curve[r]);
    series.insert(series.begin(), std::move(gt));
    write_text(run.path() / "spectrum_gap.csv", gaps);
    emit_plot(series, (run.path() / "spectrum.svg").string(), {"Cluster singular values (" + ds.ids.front() + ")", "rank index", "singular value"});
  }
  std::cout << "outputs: " << run.path().string() << '\n';
  return kOk;
}

int cmd_gradcheck(const Common& c) {
  const Settings s = resolve(c, kGradcheck);
  std::vector<Precision> modes;
  if (s.precision == "f64" || s.precision == "both") modes.push_back(Precision::kFloat64);
  if (s.precision == "f32" || s.precision == "both") modes.push_back(Precision::kFloat32);
  if (modes.empty()) throw ConfigError("precision: expected f64, f32 or both");
  bool all = true;
  std::printf("%-26s %12s %8s %8s  %s\n", "check", "max rel err", "tol", "entries", "result");
  for (const auto mode : modes) {
    for (const auto& r : run_gradient_suite(mode)) {
      all = all && r.passed;
      std::printf("%-26s %12.3e %8.0e %8zu  %s\n", r.name.c_str(), r.max_rel_error, r.tolerance, r.checked,
                  r.passed ? style().good("PASS").c_str() : style().bad("FAIL").c_str());
    }
  }
  std::cout << (all ? style().good("all gradient checks passed") : style().bad("gradient check failures")) << '\n';
  return all ? kOk : kInternal;
}

void add_common(CLI::App* sub, Common& c, unsigned cmd) {
  c.app = sub;
  sub->add_option("--config", c.config, "key = value configuration file");
  sub->add_option("--out", c.out, "output directory (default: a fresh run directory)");
  sub->add_option("--runs-root", c.runs_root, "parent of automatically named run directories");
  for (const auto& k : keys()) {
    if (k.commands & cmd) sub->add_option(k.flag, c.flags[k.name], k.help);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lldiff: conditional diffusion for low-light image enhancement"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every command");

  Common synth_c, pre_c, train_c, enh_c, eval_c, traj_c, spec_c, grad_c;
  std::string pretrained, pre_resume, train_resume, enh_ckpt, enh_gt, eval_ckpt, eval_pred, eval_gt;
  std::string traj_ckpt, spec_ckpt;
  std::vector<std::string> enh_inputs, traj_cmp, spec_cmp;
  bool record = false;

  auto* synth = app.add_subcommand("synth", "write a synthetic paired dataset");
  add_common(synth, synth_c, kSynth);

  auto* pre = app.add_subcommand("pretrain", "phase 1: noise estimator and uncertainty head");
  add_common(pre, pre_c, kPretrain);
  pre->add_option("--resume", pre_resume, "continue from a phase-1 checkpoint");

  auto* tr = app.add_subcommand("train", "phase 2: structure-aware training from a pretrained model");
  add_common(tr, train_c, kTrain);
  tr->add_option("--pretrained", pretrained, "phase-1 checkpoint (required)");
  tr->add_option("--resume", train_resume, "continue from a phase-2 checkpoint");

  auto* enh = app.add_subcommand("enhance", "enhance low-light images");
  add_common(enh, enh_c, kEnhance);
  enh->add_option("--checkpoint", enh_ckpt, "model checkpoint")->required();
  enh->add_option("inputs", enh_inputs, "PPM files or directories");
  enh->add_flag("--record-trajectory", record, "write a per-step CSV for each image");
  enh->add_option("--gt", enh_gt, "directory of ground-truth images with matching names (adds distance to the trajectory)");

  auto* ev = app.add_subcommand("eval", "PSNR / SSIM report");
  add_common(ev, eval_c, kEval);
  ev->add_option("--checkpoint", eval_ckpt, "score a model on the dataset given by data");
  ev->add_option("--pred", eval_pred, "directory of enhanced images");
  ev->add_option("--gt", eval_gt, "directory of reference images");

  auto* diag = app.add_subcommand("diagnose", "trajectory and singular-spectrum diagnostics");
  diag->require_subcommand(1);
  auto* traj = diag->add_subcommand("trajectory", "reverse-trajectory curvature");
  add_common(traj, traj_c, kDiagnose);
  traj->add_option("--checkpoint", traj_ckpt, "model checkpoint");
  traj->add_option("--compare", traj_cmp, "checkpoints to compare on one plot")->expected(2, 16);
  auto* spec = diag->add_subcommand("spectrum", "per-cluster singular values");
  add_common(spec, spec_c, kDiagnose);
  spec->add_option("--checkpoint", spec_ckpt, "model checkpoint");
  spec->add_option("--compare", spec_cmp, "checkpoints to compare on one plot")->expected(2, 16);

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable operation");
  add_common(grad, grad_c, kGradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kBadConfig;
  }

  try {
    if (*synth) return cmd_synth(synth_c);
    if (*pre) return cmd_fit(pre_c, false, "", pre_resume);
    if (*tr) return cmd_fit(train_c, true, pretrained, train_resume);
    if (*enh) return cmd_enhance(enh_c, enh_ckpt, enh_inputs, record, enh_gt);
    if (*ev) return cmd_eval(eval_c, eval_ckpt, eval_pred, eval_gt);
    if (*traj) return cmd_diagnose(traj_c, "trajectory", traj_ckpt, traj_cmp);
    if (*spec) return cmd_diagnose(spec_c, "spectrum", spec_ckpt, spec_cmp);
    if (*grad) return cmd_gradcheck(grad_c);
  } catch (const ConfigError& e) {
    std::cerr << style().bad("config error: ") << e.what() << '\n';
    return kBadConfig;
  } catch (const CompatibilityError& e) {
    std::cerr << style().bad("incompatible: ") << e.what() << '\n';
    return kBadConfig;
  } catch (const DimensionError& e) {
    std::cerr << style().bad("invalid input: ") << e.what() << '\n';
    return kBadConfig;
  } catch (const IoError& e) {
    std::cerr << style().bad("I/O error: ") << e.what() << '\n';
    return kIoFailure;
  } catch (const std::exception& e) {
    std::cerr << style().bad("internal error: ") << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}
