// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lldiff/data.hpp"
#include "lldiff/metrics.hpp"
#include "lldiff/rng.hpp"

namespace lldiff {
namespace {

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img({h, w, 3});
  for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
  return img;
}

Image offset(const Image& a, float d) {
  Image b = a;
  for (auto& v : b.data()) v += d;
  return b;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TEST(Psnr, ClosedForms) {
  const Image a({4, 4, 3}, 0.3f);
  EXPECT_EQ(psnr(a, a), 99.0);
  const Tensor<double> z({8}, 0.0), o1({8}, 0.1), one({8}, 1.0);
  EXPECT_NEAR(psnr(z, o1), 20.0, 1e-12);
  EXPECT_NEAR(psnr(z, one), 0.0, 1e-12);
}

TEST(Psnr, SymmetricAndMonotoneInNoise) {
  const Image a = random_image(16, 16, 1);
  Rng rng(2);
  const Image n = rng.normal_tensor<float>({16, 16, 3});
  double prev = 1e9;
  for (float amp : {0.01f, 0.02f, 0.05f, 0.1f, 0.2f}) {
    Image b = a;
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += amp * n[i];
    const double v = psnr(a, b);
    EXPECT_EQ(v, psnr(b, a));
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(Psnr, ShapeMismatchThrows) { EXPECT_THROW(psnr(Image({4, 4, 3}), Image({4, 5, 3})), DimensionError); }

TEST(Ssim, IdenticalIsOne) {
  const Image a = random_image(20, 24, 3);
  EXPECT_EQ(ssim(a, a), 1.0);
}

TEST(Ssim, InvertedImageScoresBelowOne) {
  const Image a = random_image(16, 16, 4);
  Image b = a;
  for (auto& v : b.data()) v = 1.0f - v;
  EXPECT_LT(ssim(a, b), 1.0);
}

TEST(Ssim, ConstantsReduceToLuminanceTerm) {
  constexpr double c1 = 1e-4;
  for (auto [u, v] : {std::pair{0.2, 0.7}, std::pair{0.5, 0.05}, std::pair{0.9, 0.1}}) {
    const Tensor<double> a({12, 13, 3}, u), b({12, 13, 3}, v);
    EXPECT_NEAR(ssim(a, b), (2 * u * v + c1) / (u * u + v * v + c1), 1e-6);
  }
}

TEST(Ssim, Symmetric) {
  const Image a = random_image(16, 16, 5), b = random_image(16, 16, 6);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-15);
}

TEST(Ssim, ChannelsAveraged) {
  const Image a = random_image(14, 14, 7), b = random_image(14, 14, 8);
  double mean = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    Tensor<float> pa({14, 14}), pb({14, 14});
    for (std::size_t i = 0; i < 14 * 14; ++i) {
      pa[i] = a[i * 3 + c];
      pb[i] = b[i * 3 + c];
    }
    mean += ssim(pa, pb) / 3.0;
  }
  EXPECT_NEAR(ssim(a, b), mean, 1e-12);
}

TEST(Ssim, TooSmallThrows) {
  EXPECT_THROW(ssim(Image({10, 16, 3}), Image({10, 16, 3})), DimensionError);
  EXPECT_THROW(ssim(Image({16, 16, 3}), Image({16, 12, 3})), DimensionError);
}

std::vector<Tensor<double>> path(std::initializer_list<std::pair<double, double>> pts) {
  std::vector<Tensor<double>> out;
  for (auto [x, y] : pts) out.push_back(Tensor<double>({2}, std::vector<double>{x, y}));
  return out;
}

TEST(Curvature, StraightMonotoneIsZero) {
  EXPECT_NEAR(*trajectory_curvature(path({{0, 0}, {0.5, 1}, {1, 2}, {3, 6}})), 0.0, 1e-15);
}

TEST(Curvature, RightAngle) {
  EXPECT_NEAR(*trajectory_curvature(path({{0, 0}, {1, 0}, {1, 1}})), std::sqrt(2.0) - 1.0, 1e-15);
}

TEST(Curvature, BacktrackingIsPositive) { EXPECT_GT(*trajectory_curvature(path({{0, 0}, {2, 0}, {1, 0}})), 0.0); }

TEST(Curvature, TranslationAndScaleInvariant) {
  Rng rng(9);
  std::vector<Tensor<double>> snaps;
  for (int i = 0; i < 6; ++i) snaps.push_back(rng.normal_tensor<double>({5}));
  const double base = *trajectory_curvature(snaps);
  auto moved = snaps;
  for (auto& s : moved) {
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = 3.5 * s[i] + 7.0 - static_cast<double>(i);
  }
  EXPECT_NEAR(*trajectory_curvature(moved), base, 1e-12);
}

TEST(Curvature, CoincidentEndpointsUndefined) { EXPECT_FALSE(trajectory_curvature(path({{0, 0}, {1, 0}, {0, 0}})).has_value()); }

TEST(Curvature, TooFewSnapshotsThrows) { EXPECT_THROW(trajectory_curvature(path({{0, 0}, {1, 0}})), DimensionError); }

TEST(Curvature, ReadsTrajectoryRecord) {
  TrajectoryRecord rec;
  for (float v : {0.0f, 1.0f, 0.5f}) rec.points.push_back({0, 0.5, v, std::nullopt, Image({4, 4, 3}, v)});
  // Path 1.5 over chord 0.5, per-pixel distances scaled alike.
  EXPECT_NEAR(*trajectory_curvature(rec), 2.0, 1e-12);
}

TEST(SpectrumGap, ZeroOnIdentity) {
  const Image x = synth_scene(3, 16, 16, 3);
  EXPECT_EQ(spectrum_gap(x, x, StructureConfig{}, 1), 0.0);
}

TEST(SpectrumGap, NoiseMakesItPositive) {
  const Image x = synth_scene(4, 16, 16, 3);
  Rng rng(5);
  const Image n = rng.normal_tensor<float>(x.shape(), 0.1);
  Image y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += n[i];
  EXPECT_GT(spectrum_gap(y, x, StructureConfig{}, 1), 0.0);
}

TEST(SpectrumGap, EqualsMeanOfSpectrumGaps) {
  const Image x = synth_scene(6, 16, 16, 3), y = offset(x, 0.05f);
  const auto sp = spectrum_pair(y, x, StructureConfig{}, 2);
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < sp.rec.size(); ++j) {
    s += sp.gaps()[j];
    n += sp.rec[j].size();
  }
  EXPECT_NEAR(spectrum_gap(y, x, StructureConfig{}, 2), s / static_cast<double>(n), 1e-12);
}

TEST(EvalReport, MeansAndCsv) {
  EvalReport r;
  r.rows.push_back({"a", 20.0, 0.5, 0.1, std::nullopt});
  r.rows.push_back({"b", 30.0, 0.7, std::nullopt, std::nullopt});
  EXPECT_DOUBLE_EQ(r.mean_psnr(), 25.0);
  EXPECT_DOUBLE_EQ(r.mean_ssim(), 0.6);
  EXPECT_DOUBLE_EQ(r.mean_curvature(), 0.1);
  EXPECT_TRUE(std::isnan(r.mean_spectrum_gap()));
  const auto path = (std::filesystem::temp_directory_path() / "lldiff_eval.csv").string();
  r.write_csv(path);
  EXPECT_EQ(slurp(path), "image_id,psnr,ssim,curvature\na,20,0.5,0.1\nb,30,0.7,\nmean,25,0.6,0.1\n");
}

// Minimal well-formedness check: balanced, properly nested elements and
// quoted attributes.
bool well_formed(const std::string& s) {
  std::vector<std::string> stack;
  std::size_t i = 0;
  while ((i = s.find('<', i)) != std::string::npos) {
    const std::size_t j = s.find('>', i);
    if (j == std::string::npos) return false;
    const std::string tag = s.substr(i + 1, j - i - 1);
    i = j + 1;
    if (tag.empty()) return false;
    if (tag[0] == '?') continue;
    if (std::count(tag.begin(), tag.end(), '"') % 2 != 0) return false;
    if (tag[0] == '/') {
      if (stack.empty() || stack.back() != tag.substr(1)) return false;
      stack.pop_back();
    } else if (tag.back() != '/') {
      stack.push_back(tag.substr(0, tag.find(' ')));
    }
  }
  return stack.empty();
}

TEST(Plot, OnePolylinePerSeries) {
  const auto one = render_plot({{"loss", {{0, 1}, {1, 0.5}}}});
  std::size_t count = 0;
  for (std::size_t p = 0; (p = one.find("<polyline", p)) != std::string::npos; ++p) ++count;
  EXPECT_EQ(count, 1u);
  const auto two = render_plot({{"a", {{0, 1}, {1, 2}}}, {"b & c", {{0, 3}}}}, {"t<1>", "x", "y"});
  count = 0;
  for (std::size_t p = 0; (p = two.find("<polyline", p)) != std::string::npos; ++p) ++count;
  EXPECT_EQ(count, 2u);
  EXPECT_NE(two.find("b &amp; c"), std::string::npos);
  EXPECT_TRUE(well_formed(one));
  EXPECT_TRUE(well_formed(two));
}

TEST(Plot, DeterministicFile) {
  const std::vector<PlotSeries> s = {{"curvature", {{0, 0.3}, {1, 0.2}, {2, 0.25}}}};
  const auto dir = std::filesystem::temp_directory_path();
  emit_plot(s, (dir / "lldiff_p1.svg").string(), {"c", "step", "value"});
  emit_plot(s, (dir / "lldiff_p2.svg").string(), {"c", "step", "value"});
  EXPECT_EQ(slurp((dir / "lldiff_p1.svg").string()), slurp((dir / "lldiff_p2.svg").string()));
}

TEST(Plot, EmptyInputRejected) {
  EXPECT_THROW(render_plot({}), ConfigError);
  EXPECT_THROW(render_plot({{"empty", {}}}), ConfigError);
  EXPECT_THROW(render_plot({{"nan", {{0, std::nan("")}}}}), ConfigError);
}

}  // namespace
}  // namespace lldiff
