// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "lldiff/image_io.hpp"
#include "lldiff/nn_ops.hpp"
#include "lldiff/rng.hpp"
#include "lldiff/schedules.hpp"
#include "lldiff/svd.hpp"

namespace lldiff {

/// Non-overlapping b x b tiling of an H x W x 3 image.
struct PatchGrid {
  std::size_t block = 0;
  std::size_t rows = 0;  // blocks per column
  std::size_t cols = 0;  // blocks per row

  static PatchGrid for_image(std::size_t h, std::size_t w, std::size_t b) {
    if (b == 0 || h % b || w % b) {
      throw DimensionError("patch grid: image " + std::to_string(h) + "x" + std::to_string(w) +
                           " not divisible by block edge " + std::to_string(b));
    }
    return {b, h / b, w / b};
  }

  std::size_t m() const noexcept { return block * block * 3; }
  std::size_t n() const noexcept { return rows * cols; }
  std::size_t height() const noexcept { return rows * block; }
  std::size_t width() const noexcept { return cols * block; }

  /// Offset inside an H x W x 3 image of element r of block i.
  std::size_t hwc_offset(std::size_t i, std::size_t r) const noexcept {
    const std::size_t c = r % 3, dx = (r / 3) % block, dy = r / 3 / block;
    const std::size_t y = (i / cols) * block + dy, x = (i % cols) * block + dx;
    return (y * width() + x) * 3 + c;
  }

  /// Same element inside a N x 3 x H x W tensor, batch element `n`.
  std::size_t nchw_offset(std::size_t n, std::size_t i, std::size_t r) const noexcept {
    const std::size_t c = r % 3, dx = (r / 3) % block, dy = r / 3 / block;
    const std::size_t y = (i / cols) * block + dy, x = (i % cols) * block + dx;
    return ((n * 3 + c) * height() + y) * width() + x;
  }

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

/// Block vectors in row-major block order; each of length m with the
/// (dy * b + dx) * 3 + c flattening.
struct Patches {
  PatchGrid grid;
  std::vector<double> data;  // n x m row-major

  const double* block(std::size_t i) const { return data.data() + i * grid.m(); }
};

inline Patches patchify(const Image& img, std::size_t b) {
  require_image(img, "patchify");
  Patches p{PatchGrid::for_image(img.dim(0), img.dim(1), b), {}};
  const std::size_t n = p.grid.n(), m = p.grid.m();
  p.data.resize(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < m; ++r) p.data[i * m + r] = img[p.grid.hwc_offset(i, r)];
  }
  return p;
}

inline Image unpatchify(const Patches& p) {
  Image img({p.grid.height(), p.grid.width(), 3});
  const std::size_t m = p.grid.m();
  for (std::size_t i = 0; i < p.grid.n(); ++i) {
    for (std::size_t r = 0; r < m; ++r) img[p.grid.hwc_offset(i, r)] = static_cast<float>(p.data[i * m + r]);
  }
  return img;
}

/// Partition of the blocks. Labels are canonical: clusters are numbered by
/// their smallest member, and members are ascending.
struct ClusterSet {
  PatchGrid grid;
  std::vector<std::size_t> assignment;
  std::vector<std::vector<std::size_t>> members;

  std::size_t k() const noexcept { return members.size(); }

  static ClusterSet from_assignment(const PatchGrid& grid, const std::vector<std::size_t>& raw) {
    if (raw.size() != grid.n()) throw DimensionError("cluster assignment length does not match the grid");
    ClusterSet cs{grid, std::vector<std::size_t>(raw.size()), {}};
    std::vector<std::size_t> relabel;
    std::vector<bool> seen;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i] >= seen.size()) {
        seen.resize(raw[i] + 1, false);
        relabel.resize(raw[i] + 1, 0);
      }
      if (!seen[raw[i]]) {
        seen[raw[i]] = true;
        relabel[raw[i]] = cs.members.size();
        cs.members.emplace_back();
      }
      cs.assignment[i] = relabel[raw[i]];
      cs.members[cs.assignment[i]].push_back(i);
    }
    return cs;
  }

  friend bool operator==(const ClusterSet&, const ClusterSet&) = default;
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t m) {
  double s = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    const double d = a[r] - b[r];
    s += d * d;
  }
  return s;
}

inline void require_k(std::size_t k, std::size_t n) {
  if (k == 0 || k > n) throw ConfigError("cluster count " + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
}

}  // namespace detail

/// Sum of squared distances of blocks to their cluster means.
inline double inertia(const Patches& p, const ClusterSet& cs) {
  const std::size_t m = p.grid.m();
  double total = 0.0;
  for (const auto& mem : cs.members) {
    std::vector<double> mean(m, 0.0);
    for (std::size_t i : mem) {
      for (std::size_t r = 0; r < m; ++r) mean[r] += p.block(i)[r];
    }
    for (auto& v : mean) v /= static_cast<double>(mem.size());
    for (std::size_t i : mem) total += detail::sq_dist(p.block(i), mean.data(), m);
  }
  return total;
}

/// Lloyd's algorithm with k-means++ seeding.
inline ClusterSet cluster_kmeans(const Patches& p, std::size_t k, std::uint64_t seed, std::size_t max_iters = 50) {
  const std::size_t n = p.grid.n(), m = p.grid.m();
  detail::require_k(k, n);
  if (max_iters == 0) throw ConfigError("k-means needs at least one iteration");
  Rng rng(seed);

  std::vector<double> centers;
  centers.reserve(k * m);
  auto add_center = [&](std::size_t i) { centers.insert(centers.end(), p.block(i), p.block(i) + m); };
  add_center(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1)));
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], detail::sq_dist(p.block(i), centers.data() + (c - 1) * m, m));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      std::size_t last_positive = 0;
      for (pick = 0; pick < n; ++pick) {
        if (d2[pick] > 0.0) last_positive = pick;
        if (u < d2[pick]) break;
        u -= d2[pick];
      }
      if (pick == n) pick = last_positive;  // rounding ran past the end
    } else {
      // All points coincide with a center; take the first not yet chosen.
      pick = c;
    }
    add_center(pick);
  }

  std::vector<std::size_t> assign(n, k);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = detail::sq_dist(p.block(i), centers.data() + c * m, m);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }

    // Repair empty clusters by stealing the point farthest from its centroid.
    std::vector<std::size_t> size(k, 0);
    for (std::size_t a : assign) ++size[a];
    for (std::size_t c = 0; c < k; ++c) {
      if (size[c] > 0) continue;
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (size[assign[i]] < 2) continue;
        const double d = detail::sq_dist(p.block(i), centers.data() + assign[i] * m, m);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      --size[assign[far]];
      assign[far] = c;
      size[c] = 1;
      changed = true;
    }

    std::fill(centers.begin(), centers.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t r = 0; r < m; ++r) centers[assign[i] * m + r] += p.block(i)[r];
    }
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t r = 0; r < m; ++r) centers[c * m + r] /= static_cast<double>(size[c]);
    }
    if (!changed) break;
  }
  return ClusterSet::from_assignment(p.grid, assign);
}

struct WardMerge {
  std::size_t a;  // surviving cluster id (the smaller index)
  std::size_t b;
  double height;  // Lance-Williams Ward distance on squared Euclidean input
};

/// Full agglomerative merge sequence. Cluster i starts as block i; a merge of
/// (a, b) keeps id a. Ties go to the lexicographically smallest pair.
inline std::vector<WardMerge> ward_merges(const Patches& p, std::size_t stop_at = 1) {
  const std::size_t n = p.grid.n(), m = p.grid.m();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) d[i * n + j] = d[j * n + i] = detail::sq_dist(p.block(i), p.block(j), m);
  }
  std::vector<std::size_t> size(n, 1);
  std::vector<bool> active(n, true);
  std::vector<WardMerge> merges;
  for (std::size_t left = n; left > std::max<std::size_t>(stop_at, 1); --left) {
    std::size_t bi = n, bj = n;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (active[j] && d[i * n + j] < best) {
          best = d[i * n + j];
          bi = i;
          bj = j;
        }
      }
    }
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == bi || k == bj) continue;
      const double ni = static_cast<double>(size[bi]), nj = static_cast<double>(size[bj]), nk = static_cast<double>(size[k]);
      const double v = ((ni + nk) * d[bi * n + k] + (nj + nk) * d[bj * n + k] - nk * best) / (ni + nj + nk);
      d[bi * n + k] = d[k * n + bi] = v;
    }
    size[bi] += size[bj];
    active[bj] = false;
    merges.push_back({bi, bj, best});
  }
  return merges;
}

/// Ward agglomerative clustering cut at k clusters.
inline ClusterSet cluster_hierarchical(const Patches& p, std::size_t k) {
  const std::size_t n = p.grid.n();
  detail::require_k(k, n);
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  for (const auto& mg : ward_merges(p, k)) parent[mg.b] = mg.a;
  std::vector<std::size_t> assign(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t r = i;
    while (parent[r] != r) r = parent[r];
    assign[i] = r;
  }
  return ClusterSet::from_assignment(p.grid, assign);
}

enum class ClusterMethod { kKMeans, kHierarchical };

struct StructureConfig {
  std::size_t block = 4;
  std::size_t clusters = 0;  // 0 selects max(2, n / 16)
  ClusterMethod method = ClusterMethod::kKMeans;
  std::size_t kmeans_iters = 50;

  std::size_t resolve_k(std::size_t n) const {
    const std::size_t k = clusters ? clusters : std::max<std::size_t>(2, n / 16);
    return std::min(k, n);
  }
};

inline ClusterSet cluster_blocks(const Patches& p, const StructureConfig& cfg, std::uint64_t seed) {
  const std::size_t k = cfg.resolve_k(p.grid.n());
  return cfg.method == ClusterMethod::kKMeans ? cluster_kmeans(p, k, seed, cfg.kmeans_iters) : cluster_hierarchical(p, k);
}

/// m x n_j row-major matrix per cluster, columns in member order.
template <typename T>
std::vector<Tensor<T>> build_matrices(const ClusterSet& cs, const Patches& p) {
  if (!(p.grid == cs.grid)) throw DimensionError("build_matrices: patch grid differs from the clustered grid");
  const std::size_t m = p.grid.m();
  std::vector<Tensor<T>> out;
  for (const auto& mem : cs.members) {
    Tensor<T> mat({m, mem.size()});
    for (std::size_t j = 0; j < mem.size(); ++j) {
      for (std::size_t r = 0; r < m; ++r) mat[r * mem.size() + j] = static_cast<T>(p.block(mem[j])[r]);
    }
    out.push_back(std::move(mat));
  }
  return out;
}

/// Gather index lists that lift the same matrices out of batch element `n`
/// of an N x 3 x H x W tensor.
inline std::vector<std::shared_ptr<const std::vector<std::size_t>>> cluster_gather_indices(const ClusterSet& cs,
                                                                                           std::size_t n) {
  const std::size_t m = cs.grid.m();
  std::vector<std::shared_ptr<const std::vector<std::size_t>>> out;
  for (const auto& mem : cs.members) {
    auto idx = std::make_shared<std::vector<std::size_t>>(m * mem.size());
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < mem.size(); ++j) (*idx)[r * mem.size() + j] = cs.grid.nchw_offset(n, mem[j], r);
    }
    out.push_back(std::move(idx));
  }
  return out;
}

template <typename T>
std::vector<Var<T>> build_matrices(const ClusterSet& cs, Var<T> x_nchw, std::size_t n) {
  const Shape& s = x_nchw.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != cs.grid.height() || s[3] != cs.grid.width() || n >= s[0]) {
    throw DimensionError("build_matrices: tensor " + to_string(s) + " does not match the clustered grid");
  }
  std::vector<Var<T>> out;
  const auto idx = cluster_gather_indices(cs, n);
  for (std::size_t j = 0; j < idx.size(); ++j) out.push_back(gather(x_nchw, idx[j], Shape{cs.grid.m(), cs.members[j].size()}));
  return out;
}

template <typename T>
std::vector<double> spectrum(const Tensor<T>& mat) {
  return thin_svd<T>(mat.data(), mat.dim(0), mat.dim(1)).sigma;
}

/// Mean L1 gap between the spectra of matching cluster matrices. Ground-truth
/// spectra are constants.
template <typename T>
Var<T> rank_loss(const std::vector<Var<T>>& ms_rec, const std::vector<Tensor<T>>& ms_gt) {
  if (ms_rec.empty() || ms_rec.size() != ms_gt.size()) throw DimensionError("rank_loss: cluster counts differ");
  Tape<T>& tape = *ms_rec.front().tape;
  Var<T> total = tape.constant(Tensor<T>::scalar(T{0}));
  std::size_t count = 0;
  for (std::size_t j = 0; j < ms_rec.size(); ++j) {
    if (ms_rec[j].shape() != ms_gt[j].shape()) {
      throw DimensionError("rank_loss: cluster " + std::to_string(j) + " shapes " + to_string(ms_rec[j].shape()) + " vs " +
                           to_string(ms_gt[j].shape()));
    }
    const Var<T> s_rec = singular_values(ms_rec[j]);
    const auto s_gt = spectrum(ms_gt[j]);
    Tensor<T> gt(s_rec.shape());
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = static_cast<T>(s_gt[i]);
    total = add(total, sum(abs(sub(s_rec, tape.constant(std::move(gt))))));
    count += s_gt.size();
  }
  return mul(total, static_cast<T>(1.0 / static_cast<double>(count)));
}

/// kappa_t-weighted rank loss.
template <typename T>
Var<T> weighted_rank_loss(const std::vector<Var<T>>& ms_rec, const std::vector<Tensor<T>>& ms_gt, std::size_t t,
                          const NoiseSchedule& schedule) {
  const double kappa = t == 0 ? 1.0 : schedule.kappa(t);
  return mul(rank_loss(ms_rec, ms_gt), static_cast<T>(kappa));
}

struct SpectrumPair {
  std::vector<std::vector<double>> rec;
  std::vector<std::vector<double>> gt;

  std::vector<double> gaps() const {
    std::vector<double> g;
    for (std::size_t j = 0; j < rec.size(); ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < rec[j].size(); ++i) s += std::abs(rec[j][i] - gt[j][i]);
      g.push_back(s);
    }
    return g;
  }

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "cluster_id,rank_index,sigma_rec,sigma_gt\n";
    char buf[128];
    for (std::size_t j = 0; j < rec.size(); ++j) {
      for (std::size_t i = 0; i < rec[j].size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.10g,%.10g\n", j, i, rec[j][i], gt[j][i]);
        os << buf;
      }
    }
    if (!os) throw IoError("write failed for " + path);
  }
};

/// Spectra of a reconstruction and its ground truth under the clustering of
/// the ground truth.
inline SpectrumPair spectrum_pair(const Image& rec, const Image& gt, const StructureConfig& cfg, std::uint64_t seed) {
  if (rec.shape() != gt.shape()) throw DimensionError("spectrum_pair: image shapes differ");
  const Patches pg = patchify(gt, cfg.block);
  const Patches pr = patchify(rec, cfg.block);
  const ClusterSet cs = cluster_blocks(pg, cfg, seed);
  SpectrumPair out;
  for (const auto& m : build_matrices<double>(cs, pr)) out.rec.push_back(spectrum(m));
  for (const auto& m : build_matrices<double>(cs, pg)) out.gt.push_back(spectrum(m));
  return out;
}

}  // namespace lldiff
