// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "lldiff/sha256.hpp"
#include "lldiff/tensor.hpp"

namespace lldiff {

/// H x W x 3 image, channel-interleaved, values nominally in [0, 1].
using Image = Tensor<float>;

inline void require_image(const Image& img, const char* what) {
  if (img.rank() != 3 || img.dim(2) != 3) {
    throw DimensionError(std::string(what) + ": expected H x W x 3 image, got " + to_string(img.shape()));
  }
}

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  require_image(img, "encode_ppm");
  const std::string header = "P6\n" + std::to_string(img.dim(1)) + " " + std::to_string(img.dim(0)) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + img.size());
  for (float v : img.data()) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    out.push_back(static_cast<std::uint8_t>(std::lround(c * 255.0f)));
  }
  return out;
}

/// Parses a binary P6 pixmap with maxval 255.
inline Image decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>") {
  std::size_t pos = 0;
  auto error = [&](const std::string& msg) {
    return IoError(origin + ": " + msg + " at byte offset " + std::to_string(pos));
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw error("format error: expected binary PPM magic 'P6'");
  }
  pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&]() -> std::size_t {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw error("malformed header: expected integer");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw error("malformed header: value too large");
      ++pos;
    }
    return v;
  };
  const std::size_t w = read_uint();
  const std::size_t h = read_uint();
  const std::size_t maxval = read_uint();
  if (w == 0 || h == 0) throw error("malformed header: zero dimension");
  if (maxval != 255) throw error("unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw error("malformed header: missing separator");
  ++pos;
  const std::size_t need = w * h * 3;
  if (bytes.size() - pos < need) {
    pos = bytes.size();
    throw error("truncated payload: expected " + std::to_string(need) + " bytes");
  }
  Image img({h, w, 3});
  for (std::size_t i = 0; i < need; ++i) img[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
  return img;
}

inline void save_ppm(const Image& img, const std::string& path) {
  const auto bytes = encode_ppm(img);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path);
}

inline Image load_ppm(const std::string& path) { return decode_ppm(read_file_bytes(path), path); }

/// H x W x 3 -> 1 x 3 x H x W.
template <typename T = float>
Tensor<T> hwc_to_nchw(const Image& img) {
  require_image(img, "hwc_to_nchw");
  const std::size_t h = img.dim(0), w = img.dim(1);
  Tensor<T> out({1, 3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out[(c * h + y) * w + x] = static_cast<T>(img[(y * w + x) * 3 + c]);
    }
  }
  return out;
}

/// Extracts batch element `n` of an N x 3 x H x W tensor as an H x W x 3 image.
template <typename T>
Image nchw_to_hwc(const Tensor<T>& t, std::size_t n = 0) {
  if (t.rank() != 4 || t.dim(1) != 3) throw DimensionError("nchw_to_hwc: expected N x 3 x H x W, got " + to_string(t.shape()));
  const std::size_t h = t.dim(2), w = t.dim(3);
  Image out({h, w, 3});
  const std::size_t base = n * 3 * h * w;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out[(y * w + x) * 3 + c] = static_cast<float>(t[base + (c * h + y) * w + x]);
    }
  }
  return out;
}

}  // namespace lldiff
