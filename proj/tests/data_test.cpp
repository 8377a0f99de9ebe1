// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "lldiff/data.hpp"

namespace lldiff {
namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("lldiff_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TEST(SynthScene, NoMotifsIsSmoothGradient) {
  const Image img = synth_scene(5, 32, 32, 0);
  // Bilinear field: second differences along rows vanish up to rounding.
  for (std::size_t y = 0; y < 32; ++y) {
    for (std::size_t x = 1; x + 1 < 32; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double d2 = img[(y * 32 + x + 1) * 3 + c] - 2.0 * img[(y * 32 + x) * 3 + c] + img[(y * 32 + x - 1) * 3 + c];
        EXPECT_NEAR(d2, 0.0, 1e-6);
      }
    }
  }
}

TEST(SynthScene, Deterministic) {
  EXPECT_EQ(synth_scene(9, 64, 48, 4), synth_scene(9, 64, 48, 4));
  EXPECT_FALSE(synth_scene(9, 64, 48, 4) == synth_scene(10, 64, 48, 4));
}

TEST(SynthScene, StampedMotifBlocksAreIdentical) {
  const Scene scene = synth_scene_layout(3, 64, 64, 4);
  ASSERT_EQ(scene.stamps.size(), 16u);
  const std::size_t e = scene.motif_edge;
  auto block = [&](const MotifStamp& s) {
    std::vector<float> v;
    for (std::size_t y = 0; y < e; ++y) {
      for (std::size_t x = 0; x < e * 3; ++x) v.push_back(scene.image[((s.row + y) * 64 + s.col) * 3 + x]);
    }
    return v;
  };
  for (std::size_t m = 0; m < 4; ++m) {
    std::vector<std::vector<float>> copies;
    std::vector<std::pair<std::size_t, std::size_t>> places;
    for (const auto& s : scene.stamps) {
      if (s.motif == m) {
        copies.push_back(block(s));
        places.emplace_back(s.row, s.col);
      }
    }
    ASSERT_EQ(copies.size(), 4u);
    for (std::size_t i = 1; i < copies.size(); ++i) EXPECT_EQ(copies[i], copies[0]);
    std::sort(places.begin(), places.end());
    EXPECT_EQ(std::unique(places.begin(), places.end()), places.end());
  }
}

TEST(SynthScene, SmallImagesStillGetThreeStamps) {
  const Scene scene = synth_scene_layout(3, 16, 16, 5);
  ASSERT_FALSE(scene.stamps.empty());
  EXPECT_GE(scene.stamps.size(), 3u);
  EXPECT_THROW(synth_scene(1, 8, 32, 1), DimensionError);
}

TEST(Degrade, IdentityDegradation) {
  const Image x0 = synth_scene(1, 32, 32, 2);
  DegradationParams p;
  p.illum_min = p.illum_max = 1.0;
  p.noise_sigma = 0.0;
  Rng rng(0);
  EXPECT_EQ(degrade(x0, p, rng).y, x0);
}

TEST(Degrade, ConstantQuarterScale) {
  const Image x0 = synth_scene(2, 32, 32, 2);
  DegradationParams p;
  p.illum_min = p.illum_max = 0.25;
  p.noise_sigma = 0.0;
  Rng rng(0);
  const auto pair = degrade(x0, p, rng);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_EQ(pair.y[i], x0[i] / 4.0f);
}

TEST(Degrade, NoiseVarianceMonteCarlo) {
  const Image x0 = synth_scene(4, 128, 128, 4);
  DegradationParams p;
  p.noise_sigma = 0.05;
  Rng rng(17);
  const auto r = degrade_detailed(x0, p, rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double d = r.y_unclamped[i] - static_cast<double>(x0[i]) * r.illumination[i / 3];
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(x0.size());
  EXPECT_NEAR(mse, 0.0025, 0.00025);
}

TEST(Degrade, RangeAndAttenuationInvariants) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Image x0 = synth_scene(seed, 32, 32, 3);
    DegradationParams p;
    p.noise_sigma = 0.3;
    Rng rng(seed);
    const auto noisy = degrade(x0, p, rng);
    for (float v : noisy.y.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    p.noise_sigma = 0.0;
    const auto clean = degrade(x0, p, rng);
    for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_LE(clean.y[i], x0[i]);
  }
}

TEST(Degrade, RejectsInvalidParams) {
  DegradationParams p;
  p.illum_min = 0.5;
  p.illum_max = 0.4;
  Rng rng(0);
  EXPECT_THROW(degrade(synth_scene(0, 16, 16, 0), p, rng), ConfigError);
}

TEST(Ppm, RoundTripWithinQuantization) {
  const Image img = synth_scene(6, 24, 40, 2);
  const Image back = decode_ppm(encode_ppm(img));
  ASSERT_EQ(back.shape(), img.shape());
  EXPECT_LE(max_abs_diff(back, img), 1.0 / 255.0);
}

TEST(Ppm, BlackAndWhiteExact) {
  for (float v : {0.0f, 1.0f}) {
    const Image img({5, 7, 3}, v);
    const auto dir = fresh_dir("ppm_bw");
    save_ppm(img, (dir / "a.ppm").string());
    EXPECT_EQ(load_ppm((dir / "a.ppm").string()), img);
  }
}

TEST(Ppm, RejectsWrongMagic) {
  std::vector<std::uint8_t> bytes = {'P', '5', '\n', '1', ' ', '1', '\n', '2', '5', '5', '\n', 0};
  try {
    decode_ppm(bytes);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("format error"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("byte offset 0"), std::string::npos);
  }
}

TEST(Ppm, RejectsTruncatedPayloadWithOffset) {
  auto bytes = encode_ppm(Image({4, 4, 3}, 0.5f));
  bytes.resize(bytes.size() - 5);
  try {
    decode_ppm(bytes);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("byte offset " + std::to_string(bytes.size())), std::string::npos);
  }
}

TEST(Ppm, HeaderCommentsAccepted) {
  std::string text = "P6\n# comment\n2 1\n255\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  for (int i = 0; i < 6; ++i) bytes.push_back(static_cast<std::uint8_t>(i * 51));
  const Image img = decode_ppm(bytes);
  EXPECT_EQ(img.shape(), (Shape{1, 2, 3}));
  EXPECT_EQ(img[5], 1.0f);
}

TEST(Crop, FullSizeReturnsImage) {
  Rng rng(1);
  DatasetSpec spec;
  spec.size = 32;
  const auto pair = synthesize_pair(spec, 0);
  const auto c = crop_patch_pair(pair, 32, rng);
  EXPECT_EQ(c.x0, pair.x0);
  EXPECT_EQ(c.y, pair.y);
}

TEST(Crop, OriginsWithinBoundsAndAligned) {
  DatasetSpec spec;
  spec.size = 64;
  const auto pair = synthesize_pair(spec, 2);
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    CropOrigin o;
    const auto c = crop_patch_pair(pair, 32, rng, &o);
    ASSERT_LE(o.row, 32u);
    ASSERT_LE(o.col, 32u);
    EXPECT_EQ(c.x0[0], pair.x0[(o.row * 64 + o.col) * 3]);
    EXPECT_EQ(c.y[0], pair.y[(o.row * 64 + o.col) * 3]);
  }
}

TEST(Crop, DeterministicAndRejectsOversize) {
  DatasetSpec spec;
  spec.size = 32;
  const auto pair = synthesize_pair(spec, 0);
  Rng a(3), b(3);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(crop_patch_pair(pair, 16, a).x0, crop_patch_pair(pair, 16, b).x0);
  EXPECT_THROW(crop_patch_pair(pair, 33, a), DimensionError);
}

TEST(Dataset, ManifestRoundTripAndChecksums) {
  const auto dir = fresh_dir("dataset");
  DatasetSpec spec;
  spec.pairs = 3;
  spec.size = 32;
  spec.seed = 7;
  const auto records = write_dataset(spec, dir);
  ASSERT_EQ(records.size(), 3u);
  std::size_t ppm_count = 0;
  for (const auto& e : fs::directory_iterator(dir)) ppm_count += e.path().extension() == ".ppm";
  EXPECT_EQ(ppm_count, 6u);

  const auto read = read_manifest((dir / kManifestName).string());
  ASSERT_EQ(read.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(read[i].id, pair_id(i));
    EXPECT_EQ(read[i].x0_sha256, sha256_file_hex((dir / read[i].x0_path).string()));
    EXPECT_EQ(read[i].y_sha256, sha256_file_hex((dir / read[i].y_path).string()));
  }
  const Dataset ds = load_dataset(dir / kManifestName);
  EXPECT_EQ(ds.pairs.size(), 3u);
  EXPECT_LE(max_abs_diff(ds.pairs[1].x0, synthesize_pair(spec, 1).x0), 1.0 / 255.0);

  // Rewriting with the same spec reproduces identical checksums.
  const auto again = write_dataset(spec, dir);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(again[i].y_sha256, records[i].y_sha256);

  // Tampering is detected.
  {
    std::fstream f(dir / read[0].y_path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x01');
  }
  EXPECT_THROW(load_dataset(dir / kManifestName), IoError);
}

TEST(Dataset, KnownSha256Vector) {
  const std::string abc = "abc";
  const std::vector<std::uint8_t> bytes(abc.begin(), abc.end());
  EXPECT_EQ(to_hex(sha256(bytes)), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

}  // namespace
}  // namespace lldiff
