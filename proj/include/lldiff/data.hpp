// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <tuple>
#include <utility>
#include <string>
#include <vector>

#include "lldiff/image_io.hpp"
#include "lldiff/rng.hpp"

namespace lldiff {

/// Parameters of the multiplicative illumination + additive noise model.
struct DegradationParams {
  double illum_min = 0.08;
  double illum_max = 0.35;
  std::size_t illum_smoothness = 8;  // box-blur radius in pixels
  double noise_sigma = 0.02;
  std::uint64_t seed = 0;
  bool clamped = true;  // y was clamped into [0, 1]

  void validate() const {
    if (!(illum_min > 0.0 && illum_min <= illum_max && illum_max <= 1.0)) {
      throw ConfigError("illumination range must satisfy 0 < min <= max <= 1");
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise sigma must be non-negative");
  }
};

struct ImagePair {
  Image x0;  // normal light
  Image y;   // low light
  DegradationParams meta;
};

/// Where a motif was stamped; (row, col) is the top-left pixel.
struct MotifStamp {
  std::size_t motif = 0;
  std::size_t row = 0;
  std::size_t col = 0;
};

struct Scene {
  Image image;
  std::size_t motif_edge = 0;
  std::vector<MotifStamp> stamps;
};

inline constexpr std::size_t kMotifEdge = 8;
inline constexpr std::size_t kStampsPerMotif = 4;

/// Procedural scene: a smooth bilinear colour gradient with textured motifs,
/// each stamped opaquely at several grid-aligned cells so that identical
/// blocks recur at distant locations. Motif count is capped so that every
/// motif gets at least three stamps.
inline Scene synth_scene_layout(std::uint64_t seed, std::size_t height, std::size_t width, std::size_t motif_count) {
  if (height < 16 || width < 16) throw DimensionError("synth_scene requires H, W >= 16");
  Rng rng(seed);
  Scene scene;
  scene.motif_edge = kMotifEdge;
  scene.image = Image({height, width, 3});
  std::array<std::array<double, 3>, 4> corner{};
  for (auto& c : corner) {
    for (auto& v : c) v = rng.uniform(0.25, 0.9);
  }
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = static_cast<double>(y) / static_cast<double>(height - 1);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = static_cast<double>(x) / static_cast<double>(width - 1);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = corner[0][c] * (1 - fx) + corner[1][c] * fx;
        const double bottom = corner[2][c] * (1 - fx) + corner[3][c] * fx;
        scene.image[(y * width + x) * 3 + c] = static_cast<float>(top * (1 - fy) + bottom * fy);
      }
    }
  }

  const std::size_t rows = height / kMotifEdge, cols = width / kMotifEdge, cells = rows * cols;
  motif_count = std::min(motif_count, cells / 3);
  if (motif_count == 0) return scene;
  const std::size_t copies = std::min(kStampsPerMotif, cells / motif_count);

  std::vector<std::size_t> cell_order(cells);
  std::iota(cell_order.begin(), cell_order.end(), std::size_t{0});
  std::shuffle(cell_order.begin(), cell_order.end(), rng.engine());

  std::size_t next_cell = 0;
  for (std::size_t m = 0; m < motif_count; ++m) {
    // Texture: oriented stripes or a checkerboard between two random colours.
    std::array<double, 3> ca{}, cb{};
    for (std::size_t c = 0; c < 3; ++c) {
      ca[c] = rng.uniform(0.05, 1.0);
      cb[c] = rng.uniform(0.0, 0.6);
    }
    const std::size_t kind = rng.uniform_int(0, 2);
    const std::size_t period = rng.uniform_int(2, 4);
    std::vector<float> tile(kMotifEdge * kMotifEdge * 3);
    for (std::size_t y = 0; y < kMotifEdge; ++y) {
      for (std::size_t x = 0; x < kMotifEdge; ++x) {
        bool on = false;
        switch (kind) {
          case 0: on = (x / period) % 2 == 0; break;
          case 1: on = ((x + y) / period) % 2 == 0; break;
          default: on = ((x / period) + (y / period)) % 2 == 0; break;
        }
        for (std::size_t c = 0; c < 3; ++c) tile[(y * kMotifEdge + x) * 3 + c] = static_cast<float>(on ? ca[c] : cb[c]);
      }
    }
    for (std::size_t k = 0; k < copies; ++k) {
      const std::size_t cell = cell_order[next_cell++];
      const std::size_t r0 = (cell / cols) * kMotifEdge, c0 = (cell % cols) * kMotifEdge;
      scene.stamps.push_back({m, r0, c0});
      for (std::size_t y = 0; y < kMotifEdge; ++y) {
        std::copy_n(tile.data() + y * kMotifEdge * 3, kMotifEdge * 3,
                    scene.image.data().data() + ((r0 + y) * width + c0) * 3);
      }
    }
  }
  return scene;
}

inline Image synth_scene(std::uint64_t seed, std::size_t height, std::size_t width, std::size_t motif_count) {
  return synth_scene_layout(seed, height, width, motif_count).image;
}

namespace detail {

/// Separable box blur with edge clamping on a single-channel H x W field.
inline std::vector<double> box_blur(const std::vector<double>& f, std::size_t h, std::size_t w, std::size_t r) {
  if (r == 0) return f;
  std::vector<double> tmp(f.size()), out(f.size());
  const long rr = static_cast<long>(r);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (long d = -rr; d <= rr; ++d) {
        const long xx = std::clamp<long>(static_cast<long>(x) + d, 0, static_cast<long>(w) - 1);
        s += f[y * w + static_cast<std::size_t>(xx)];
      }
      tmp[y * w + x] = s / static_cast<double>(2 * r + 1);
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (long d = -rr; d <= rr; ++d) {
        const long yy = std::clamp<long>(static_cast<long>(y) + d, 0, static_cast<long>(h) - 1);
        s += tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[y * w + x] = s / static_cast<double>(2 * r + 1);
    }
  }
  return out;
}

}  // namespace detail

/// Degradation with the intermediate fields exposed for diagnostics.
struct DegradeResult {
  ImagePair pair;
  std::vector<double> illumination;  // H x W, shared by all channels
  Image noise;                        // H x W x 3
  Image y_unclamped;
};

/// y = clamp(x0 * S + N, 0, 1) with a smooth illumination field S in
/// [illum_min, illum_max] and Gaussian noise N.
inline DegradeResult degrade_detailed(const Image& x0, const DegradationParams& params, Rng& rng) {
  require_image(x0, "degrade");
  params.validate();
  const std::size_t h = x0.dim(0), w = x0.dim(1);
  std::vector<double> field(h * w);
  for (auto& v : field) v = rng.uniform();
  field = detail::box_blur(detail::box_blur(field, h, w, params.illum_smoothness), h, w, params.illum_smoothness);
  const auto [lo_it, hi_it] = std::minmax_element(field.begin(), field.end());
  const double lo = *lo_it, hi = *hi_it;
  for (auto& v : field) {
    const double f = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    v = params.illum_min + (params.illum_max - params.illum_min) * f;
  }

  DegradeResult r;
  r.illumination = std::move(field);
  r.noise = Image(x0.shape());
  r.y_unclamped = Image(x0.shape());
  r.pair.x0 = x0;
  r.pair.y = Image(x0.shape());
  r.pair.meta = params;
  r.pair.meta.clamped = true;
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t k = i * 3 + c;
      const double n = params.noise_sigma > 0.0 ? params.noise_sigma * rng.normal() : 0.0;
      r.noise[k] = static_cast<float>(n);
      const double v = static_cast<double>(x0[k]) * r.illumination[i] + n;
      r.y_unclamped[k] = static_cast<float>(v);
      r.pair.y[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return r;
}

inline ImagePair degrade(const Image& x0, const DegradationParams& params, Rng& rng) {
  return std::move(degrade_detailed(x0, params, rng).pair);
}

struct CropOrigin {
  std::size_t row = 0;
  std::size_t col = 0;
};

inline Image crop_image(const Image& img, CropOrigin o, std::size_t size) {
  require_image(img, "crop");
  const std::size_t w = img.dim(1);
  if (o.row + size > img.dim(0) || o.col + size > w) throw DimensionError("crop window exceeds image bounds");
  Image out({size, size, 3});
  for (std::size_t y = 0; y < size; ++y) {
    std::copy_n(img.data().data() + ((o.row + y) * w + o.col) * 3, size * 3, out.data().data() + y * size * 3);
  }
  return out;
}

inline CropOrigin sample_crop_origin(std::size_t height, std::size_t width, std::size_t size, Rng& rng) {
  if (size == 0 || size > std::min(height, width)) {
    throw DimensionError("crop size " + std::to_string(size) + " exceeds image " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
  return {rng.uniform_int(0, height - size), rng.uniform_int(0, width - size)};
}

/// Same random window applied to both images.
inline ImagePair crop_patch_pair(const ImagePair& pair, std::size_t size, Rng& rng, CropOrigin* origin = nullptr) {
  const CropOrigin o = sample_crop_origin(pair.x0.dim(0), pair.x0.dim(1), size, rng);
  if (origin) *origin = o;
  return {crop_image(pair.x0, o, size), crop_image(pair.y, o, size), pair.meta};
}

// ---------------------------------------------------------------------------
// On-disk datasets

struct ManifestRecord {
  std::string id;
  std::string x0_path;  // relative to the manifest directory
  std::string y_path;
  std::string x0_sha256;
  std::string y_sha256;
};

struct DatasetSpec {
  std::size_t pairs = 64;
  std::size_t size = 64;
  std::size_t motif_count = 4;
  std::uint64_t seed = 0;
  DegradationParams degradation;

  void validate() const {
    if (pairs == 0) throw ConfigError("dataset needs at least one pair");
    if (size < 16 || size % 4 != 0) throw ConfigError("image size must be >= 16 and divisible by 4");
    degradation.validate();
  }
};

inline const char* kManifestName = "manifest.txt";

/// Deterministic pair `index` of a synthetic dataset.
inline ImagePair synthesize_pair(const DatasetSpec& spec, std::size_t index) {
  const Image x0 = synth_scene(derive_seed(spec.seed, {index, 0}), spec.size, spec.size, spec.motif_count);
  DegradationParams p = spec.degradation;
  p.seed = derive_seed(spec.seed, {index, 1});
  Rng rng(p.seed);
  return degrade(x0, p, rng);
}

inline std::string pair_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%04zu", index);
  return buf;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  for (const auto& r : records) {
    os << r.id << ' ' << r.x0_path << ' ' << r.y_path << ' ' << r.x0_sha256 << ' ' << r.y_sha256 << '\n';
  }
  if (!os) throw IoError("write failed for " + path);
}

inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path);
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestRecord r;
    if (!(ls >> r.id >> r.x0_path >> r.y_path >> r.x0_sha256 >> r.y_sha256)) {
      throw IoError(path + ": malformed manifest record on line " + std::to_string(lineno));
    }
    for (const auto& prev : out) {
      if (prev.id == r.id) throw IoError(path + ": duplicate pair id " + r.id);
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Writes every pair as two PPMs plus the manifest into `dir`.
inline std::vector<ManifestRecord> write_dataset(const DatasetSpec& spec, const std::filesystem::path& dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<ManifestRecord> records;
  for (std::size_t i = 0; i < spec.pairs; ++i) {
    const ImagePair pair = synthesize_pair(spec, i);
    ManifestRecord r;
    r.id = pair_id(i);
    r.x0_path = r.id + "_normal.ppm";
    r.y_path = r.id + "_low.ppm";
    const auto x0_bytes = encode_ppm(pair.x0);
    const auto y_bytes = encode_ppm(pair.y);
    for (const auto& [name, bytes] : {std::pair{r.x0_path, &x0_bytes}, std::pair{r.y_path, &y_bytes}}) {
      std::ofstream os(dir / name, std::ios::binary);
      os.write(reinterpret_cast<const char*>(bytes->data()), static_cast<std::streamsize>(bytes->size()));
      if (!os) throw IoError("write failed for " + (dir / name).string());
    }
    r.x0_sha256 = to_hex(sha256(x0_bytes));
    r.y_sha256 = to_hex(sha256(y_bytes));
    records.push_back(std::move(r));
  }
  write_manifest((dir / kManifestName).string(), records);
  return records;
}

struct Dataset {
  std::vector<std::string> ids;
  std::vector<ImagePair> pairs;
};

/// Loads every pair listed in a manifest, verifying checksums.
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  const auto records = read_manifest(manifest_path.string());
  if (records.empty()) throw IoError(manifest_path.string() + ": manifest lists no pairs");
  const auto dir = manifest_path.parent_path();
  Dataset ds;
  for (const auto& r : records) {
    ImagePair pair;
    for (const auto& [rel, sum, dst] :
         {std::tuple{r.x0_path, r.x0_sha256, &pair.x0}, std::tuple{r.y_path, r.y_sha256, &pair.y}}) {
      const auto path = (dir / rel).string();
      const auto bytes = read_file_bytes(path);
      if (to_hex(sha256(bytes)) != sum) throw IoError(path + ": checksum mismatch against manifest");
      *dst = decode_ppm(bytes, path);
    }
    if (pair.x0.shape() != pair.y.shape()) throw DimensionError(r.id + ": image pair dimensions differ");
    ds.ids.push_back(r.id);
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

}  // namespace lldiff
