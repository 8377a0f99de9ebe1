// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lldiff/diffusion.hpp"
#include "lldiff/structure.hpp"

namespace lldiff {

inline constexpr double kPsnrCap = 99.0;

/// Peak 1.0. Exact matches report the cap instead of infinity.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("psnr: shapes " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  if (a.size() == 0) throw DimensionError("psnr: empty image");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline constexpr std::size_t kSsimWindow = 11;

inline std::array<double, kSsimWindow> ssim_kernel() {
  std::array<double, kSsimWindow> k{};
  double s = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double x = static_cast<double>(i) - 5.0;
    k[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    s += k[i];
  }
  for (auto& v : k) v /= s;
  return k;
}

// Valid-position separable Gaussian filter of an h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w) {
  static const auto k = ssim_kernel();
  const std::size_t oh = h - kSsimWindow + 1, ow = w - kSsimWindow + 1;
  std::vector<double> tmp(h * ow);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < kSsimWindow; ++i) s += k[i] * img[y * w + x + i];
      tmp[y * ow + x] = s;
    }
  }
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < kSsimWindow; ++i) s += k[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  }
  return out;
}

}  // namespace detail

/// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
/// range 1. Accepts H x W or H x W x C; channels are scored separately and
/// averaged, and each channel map is averaged over valid window positions.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("ssim: shapes " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  if (a.rank() != 2 && a.rank() != 3) throw DimensionError("ssim: expected H x W or H x W x C, got " + to_string(a.shape()));
  const std::size_t h = a.dim(0), w = a.dim(1), c = a.rank() == 3 ? a.dim(2) : 1;
  if (h < detail::kSsimWindow || w < detail::kSsimWindow) {
    throw DimensionError("ssim: image " + to_string(a.shape()) + " smaller than the 11x11 window");
  }
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  std::vector<double> pa(h * w), pb(h * w), paa(h * w), pbb(h * w), pab(h * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) {
      pa[i] = static_cast<double>(a[i * c + ch]);
      pb[i] = static_cast<double>(b[i * c + ch]);
      paa[i] = pa[i] * pa[i];
      pbb[i] = pb[i] * pb[i];
      pab[i] = pa[i] * pb[i];
    }
    const auto ma = detail::filter_valid(pa, h, w), mb = detail::filter_valid(pb, h, w);
    const auto saa = detail::filter_valid(paa, h, w), sbb = detail::filter_valid(pbb, h, w);
    const auto sab = detail::filter_valid(pab, h, w);
    double s = 0.0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
      const double va = saa[i] - ma[i] * ma[i], vb = sbb[i] - mb[i] * mb[i], cov = sab[i] - ma[i] * mb[i];
      s += ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
    }
    total += s / static_cast<double>(ma.size());
  }
  // Identical inputs can drift a few ulps off 1 through the variance terms.
  if (a == b) return 1.0;
  return total / static_cast<double>(c);
}

/// Path-straightness excess of a sequence of snapshots:
/// sum of step lengths / endpoint distance - 1. Empty when the endpoints
/// coincide, where the ratio is undefined.
template <typename T>
std::optional<double> trajectory_curvature(const std::vector<Tensor<T>>& snapshots) {
  if (snapshots.size() < 3) throw DimensionError("trajectory_curvature: need at least 3 snapshots, got " + std::to_string(snapshots.size()));
  auto dist = [](const Tensor<T>& u, const Tensor<T>& v) {
    if (u.shape() != v.shape()) throw DimensionError("trajectory_curvature: snapshot shapes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double d = static_cast<double>(u[i]) - static_cast<double>(v[i]);
      s += d * d;
    }
    return std::sqrt(s);
  };
  double path = 0.0;
  for (std::size_t i = 1; i < snapshots.size(); ++i) path += dist(snapshots[i - 1], snapshots[i]);
  const double chord = dist(snapshots.front(), snapshots.back());
  if (chord == 0.0) return std::nullopt;
  return std::max(0.0, path / chord - 1.0);
}

inline std::optional<double> trajectory_curvature(const TrajectoryRecord& rec) {
  std::vector<Image> snaps;
  snaps.reserve(rec.points.size());
  for (const auto& p : rec.points) snaps.push_back(p.snapshot);
  return trajectory_curvature(snaps);
}

/// Mean absolute singular-value gap between x_hat and x0, both cut into
/// blocks and grouped by the clustering of x0. Same quantity the structure
/// term trains on.
inline double spectrum_gap(const Image& x_hat, const Image& x0, const StructureConfig& cfg, std::uint64_t seed) {
  const SpectrumPair sp = spectrum_pair(x_hat, x0, cfg, seed);
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < sp.rec.size(); ++j) {
    for (std::size_t i = 0; i < sp.rec[j].size(); ++i) s += std::abs(sp.rec[j][i] - sp.gt[j][i]);
    n += sp.rec[j].size();
  }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

struct EvalRow {
  std::string image_id;
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> curvature;
  std::optional<double> spectrum_gap;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  double mean_psnr() const { return mean_of([](const EvalRow& r) { return std::optional(r.psnr); }); }
  double mean_ssim() const { return mean_of([](const EvalRow& r) { return std::optional(r.ssim); }); }
  // Means over the rows where the value is defined; NaN if none are.
  double mean_curvature() const { return mean_of([](const EvalRow& r) { return r.curvature; }); }
  double mean_spectrum_gap() const { return mean_of([](const EvalRow& r) { return r.spectrum_gap; }); }

  /// One row per image plus a trailing "mean" row. Undefined cells are left
  /// empty.
  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    const bool curv = std::any_of(rows.begin(), rows.end(), [](const EvalRow& r) { return r.curvature.has_value(); });
    const bool gap = std::any_of(rows.begin(), rows.end(), [](const EvalRow& r) { return r.spectrum_gap.has_value(); });
    os << "image_id,psnr,ssim" << (curv ? ",curvature" : "") << (gap ? ",spectrum_gap" : "") << '\n';
    auto cell = [](std::optional<double> v) { return v && std::isfinite(*v) ? fmt(*v) : std::string(); };
    auto line = [&](const std::string& id, double p, double s, std::optional<double> c, std::optional<double> g) {
      os << id << ',' << fmt(p) << ',' << fmt(s);
      if (curv) os << ',' << cell(c);
      if (gap) os << ',' << cell(g);
      os << '\n';
    };
    for (const auto& r : rows) line(r.image_id, r.psnr, r.ssim, r.curvature, r.spectrum_gap);
    line("mean", mean_psnr(), mean_ssim(), mean_curvature(), mean_spectrum_gap());
    if (!os) throw IoError("write failed for " + path);
  }

 private:
  static std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
  }

  template <typename F>
  double mean_of(F get) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (auto v = get(r)) {
        s += *v;
        ++n;
      }
    }
    return n == 0 ? std::nan("") : s / static_cast<double>(n);
  }
};

struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

struct PlotLabels {
  std::string title;
  std::string x;
  std::string y;
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

__attribute__((format(printf, 2, 3))) inline void appendf(std::string& out, const char* f, ...) {
  char buf[256];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  out += buf;
}

}  // namespace detail

/// Self-contained SVG line chart: axes with min/max ticks, axis labels, and a
/// legend. One polyline per series. Output depends only on the input.
inline std::string render_plot(const std::vector<PlotSeries>& series, const PlotLabels& labels = {}) {
  if (series.empty()) throw ConfigError("emit_plot: no series to draw");
  double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  bool first = true;
  for (const auto& s : series) {
    if (s.points.empty()) throw ConfigError("emit_plot: series '" + s.label + "' has no points");
    for (auto [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) throw ConfigError("emit_plot: series '" + s.label + "' has a non-finite point");
      if (first) {
        x0 = x1 = x;
        y0 = y1 = y;
        first = false;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 == x0) x1 = x0 + 1.0;
  if (y1 == y0) y1 = y0 + 1.0;

  constexpr double kW = 640, kH = 400, kL = 70, kR = 170, kT = 40, kB = 50;
  const double pw = kW - kL - kR, ph = kH - kT - kB;
  auto px = [&](double x) { return kL + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kT + ph - (y - y0) / (y1 - y0) * ph; };
  static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::string out;
  detail::appendf(out, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
  detail::appendf(out, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n", kW, kH, kW, kH);
  detail::appendf(out, "<rect width=\"100%%\" height=\"100%%\" fill=\"white\"/>\n");
  out += "<text x=\"" + std::to_string(static_cast<int>(kL + pw / 2)) + "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" +
         detail::xml_escape(labels.title) + "</text>\n";
  detail::appendf(out, "<g stroke=\"black\" stroke-width=\"1\"><line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\"/>", kL, kT + ph, kL + pw, kT + ph);
  detail::appendf(out, "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\"/></g>\n", kL, kT, kL, kT + ph);
  detail::appendf(out, "<g font-family=\"sans-serif\" font-size=\"11\">\n");
  detail::appendf(out, "<text x=\"%.2f\" y=\"%.2f\" text-anchor=\"start\">%.4g</text>\n", kL, kT + ph + 16, x0);
  detail::appendf(out, "<text x=\"%.2f\" y=\"%.2f\" text-anchor=\"end\">%.4g</text>\n", kL + pw, kT + ph + 16, x1);
  detail::appendf(out, "<text x=\"%.2f\" y=\"%.2f\" text-anchor=\"end\">%.4g</text>\n", kL - 6, kT + ph, y0);
  detail::appendf(out, "<text x=\"%.2f\" y=\"%.2f\" text-anchor=\"end\">%.4g</text>\n", kL - 6, kT + 10, y1);
  out += "<text x=\"" + std::to_string(static_cast<int>(kL + pw / 2)) + "\" y=\"" + std::to_string(static_cast<int>(kH - 12)) +
         "\" text-anchor=\"middle\">" + detail::xml_escape(labels.x) + "</text>\n";
  out += "<text x=\"16\" y=\"" + std::to_string(static_cast<int>(kT + ph / 2)) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         std::to_string(static_cast<int>(kT + ph / 2)) + ")\">" + detail::xml_escape(labels.y) + "</text>\n";
  out += "</g>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kColors[i % std::size(kColors)];
    out += "<polyline fill=\"none\" stroke=\"";
    out += color;
    out += "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t j = 0; j < series[i].points.size(); ++j) {
      detail::appendf(out, j == 0 ? "%.2f,%.2f" : " %.2f,%.2f", px(series[i].points[j].first), py(series[i].points[j].second));
    }
    out += "\"/>\n";
    const double ly = kT + 14 + 18 * static_cast<double>(i);
    detail::appendf(out, "<rect x=\"%.2f\" y=\"%.2f\" width=\"14\" height=\"3\" fill=\"%s\"/>", kL + pw + 16, ly - 4, color);
    detail::appendf(out, "<text x=\"%.2f\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"11\">", kL + pw + 36, ly);
    out += detail::xml_escape(series[i].label) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

inline void emit_plot(const std::vector<PlotSeries>& series, const std::string& path, const PlotLabels& labels = {}) {
  const std::string svg = render_plot(series, labels);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << svg;
  if (!os) throw IoError("write failed for " + path);
}

}  // namespace lldiff
