// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lldiff/denoiser.hpp"
#include "lldiff/optim.hpp"
#include "lldiff/sha256.hpp"

namespace lldiff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

/// Everything that fixes the meaning of the stored tensors: the architecture
/// and the training noise schedule.
struct ModelDescriptor {
  std::uint32_t base_channels = 16;
  std::uint32_t steps = 500;
  double beta_start = 1e-4;
  double beta_end = 2e-2;

  std::string canonical() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "arch=unet2;c=%u;emb=%zu;T=%u;b0=%.17g;b1=%.17g", base_channels,
                  DenoiserConfig::kEmbedDim, steps, beta_start, beta_end);
    return buf;
  }

  std::uint64_t hash() const {
    const std::string s = canonical();
    const auto d = sha256(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    std::uint64_t h = 0;
    for (int i = 0; i < 8; ++i) h = (h << 8) | d[i];
    return h;
  }

  friend bool operator==(const ModelDescriptor&, const ModelDescriptor&) = default;
};

struct Checkpoint {
  std::uint32_t phase = 1;  // 1 pretraining, 2 structure-aware training
  std::uint64_t iteration = 0;
  ModelDescriptor model;
  ParamSet<float> trunk;
  ParamSet<float> head;  // frozen during phase 2
  ParamSet<float> ema;   // shadow of the trunk
  AdamState<float> adam;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr char kCheckpointMagic[8] = {'L', 'L', 'D', 'I', 'F', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(V));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> b, std::string origin) : b_(b), origin_(std::move(origin)) {}

  template <typename V>
  V get() {
    V v;
    std::memcpy(&v, take(sizeof(V)), sizeof(V));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > b_.size() - pos_) {
      throw IoError(origin_ + ": truncated checkpoint at byte offset " + std::to_string(pos_) + " (needed " +
                    std::to_string(n) + " more bytes)");
    }
    const auto* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const noexcept { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::string origin_;
  std::size_t pos_ = 0;
};

// Tensor groups in storage order, each under a name prefix.
template <typename C>
auto sections(C& c) -> std::vector<std::pair<std::string, decltype(&c.trunk)>> {
  return {{"trunk/", &c.trunk}, {"head/", &c.head}, {"ema/", &c.ema}, {"adam.m/", &c.adam.m}, {"adam.v/", &c.adam.v}};
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter payload;
  detail::ByteWriter head;
  head.put_bytes(kCheckpointMagic, 8);
  head.put<std::uint32_t>(kCheckpointVersion);
  head.put<std::uint64_t>(c.model.hash());
  head.put<std::uint32_t>(c.phase);
  head.put<std::uint64_t>(c.iteration);
  head.put<std::uint64_t>(c.adam.step);
  head.put<std::uint32_t>(c.model.base_channels);
  head.put<std::uint32_t>(c.model.steps);
  head.put<double>(c.model.beta_start);
  head.put<double>(c.model.beta_end);

  std::uint32_t count = 0;
  for (auto& [prefix, set] : detail::sections(c)) count += static_cast<std::uint32_t>(set->size());
  head.put<std::uint32_t>(count);
  for (auto& [prefix, set] : detail::sections(c)) {
    for (std::size_t i = 0; i < set->size(); ++i) {
      const std::string name = prefix + set->names[i];
      const auto& t = set->tensors[i];
      head.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
      head.put_bytes(name.data(), name.size());
      head.put<std::uint8_t>(1);  // dtype: float32
      head.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
      for (std::size_t d : t.shape()) head.put<std::uint64_t>(d);
      head.put<std::uint64_t>(payload.bytes.size());
      head.put<std::uint64_t>(t.size() * sizeof(float));
      payload.put_bytes(t.data().data(), t.size() * sizeof(float));
    }
  }
  head.put<std::uint64_t>(payload.bytes.size());
  head.put_bytes(payload.bytes.data(), payload.bytes.size());
  const auto digest = sha256(payload.bytes);
  head.put_bytes(digest.data(), digest.size());
  return std::move(head.bytes);
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin = "checkpoint") {
  detail::ByteReader r(bytes, origin);
  if (std::memcmp(r.take(8), kCheckpointMagic, 8) != 0) throw IoError(origin + ": not a checkpoint (bad magic at byte offset 0)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CompatibilityError(origin + ": checkpoint format version " + std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  const auto stored_hash = r.get<std::uint64_t>();
  c.phase = r.get<std::uint32_t>();
  c.iteration = r.get<std::uint64_t>();
  c.adam.step = r.get<std::uint64_t>();
  c.model.base_channels = r.get<std::uint32_t>();
  c.model.steps = r.get<std::uint32_t>();
  c.model.beta_start = r.get<double>();
  c.model.beta_end = r.get<double>();
  if (c.model.hash() != stored_hash) throw CompatibilityError(origin + ": header descriptor does not match its config hash");

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset, nbytes;
  };
  const auto count = r.get<std::uint32_t>();
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto len = r.get<std::uint32_t>();
    const auto* p = r.take(len);
    e.name.assign(reinterpret_cast<const char*>(p), len);
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 1) throw CompatibilityError(origin + ": tensor " + e.name + " has unsupported dtype " + std::to_string(dtype));
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint64_t>());
    e.offset = r.get<std::uint64_t>();
    e.nbytes = r.get<std::uint64_t>();
    if (e.nbytes != numel(e.shape) * sizeof(float)) throw IoError(origin + ": tensor " + e.name + " size disagrees with its shape");
    entries.push_back(std::move(e));
  }
  const auto payload_size = r.get<std::uint64_t>();
  const std::size_t payload_start = r.pos();
  const auto* payload = r.take(payload_size);
  const auto* stored_digest = r.take(32);
  const auto digest = sha256(std::span(payload, payload_size));
  if (std::memcmp(digest.data(), stored_digest, 32) != 0) {
    throw IoError(origin + ": payload checksum mismatch (payload starts at byte offset " + std::to_string(payload_start) + ")");
  }

  for (auto& e : entries) {
    if (e.offset + e.nbytes > payload_size) throw IoError(origin + ": tensor " + e.name + " points outside the payload");
    Tensor<float> t(e.shape);
    std::memcpy(t.data().data(), payload + e.offset, e.nbytes);
    bool placed = false;
    for (auto& [prefix, set] : detail::sections(c)) {
      if (e.name.rfind(prefix, 0) == 0) {
        set->add(e.name.substr(prefix.size()), std::move(t));
        placed = true;
        break;
      }
    }
    if (!placed) throw IoError(origin + ": unknown tensor section in " + e.name);
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const auto bytes = encode_checkpoint(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " to " + path + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path), path); }

/// Rejects a checkpoint whose tensors or schedule do not fit `expected`,
/// naming the first offending parameter.
inline void require_compatible(const Checkpoint& c, const ModelDescriptor& expected, const std::string& origin = "checkpoint") {
  DenoiserConfig cfg;
  cfg.base_channels = expected.base_channels;
  const auto ref = init_denoiser<float>(0, cfg);
  if (c.trunk.size() != ref.size()) {
    throw CompatibilityError(origin + ": checkpoint has " + std::to_string(c.trunk.size()) + " trunk tensors, config expects " +
                             std::to_string(ref.size()));
  }
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (c.trunk.names[i] != ref.names[i] || c.trunk.tensors[i].shape() != ref.tensors[i].shape()) {
      throw CompatibilityError(origin + ": parameter " + ref.names[i] + " has shape " +
                               to_string(c.trunk.tensors[i].shape()) + " in checkpoint (" + c.trunk.names[i] +
                               ") but config expects " + to_string(ref.tensors[i].shape()));
    }
  }
  if (c.model.hash() != expected.hash()) {
    throw CompatibilityError(origin + ": config hash mismatch; checkpoint was built for " + c.model.canonical() +
                             ", current config is " + expected.canonical());
  }
}

/// Line-per-difference comparison of a checkpoint's trunk against the tensors
/// `expected` would build. Empty when they agree.
inline std::vector<std::string> checkpoint_manifest_diff(const Checkpoint& c, const ModelDescriptor& expected) {
  DenoiserConfig cfg;
  cfg.base_channels = expected.base_channels;
  const auto ref = init_denoiser<float>(0, cfg);
  std::vector<std::string> out;
  if (c.model.canonical() != expected.canonical()) {
    out.push_back("descriptor: checkpoint " + c.model.canonical() + " | config " + expected.canonical());
  }
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto it = std::find(c.trunk.names.begin(), c.trunk.names.end(), ref.names[i]);
    if (it == c.trunk.names.end()) {
      out.push_back("- trunk/" + ref.names[i] + " " + to_string(ref.tensors[i].shape()) + " (missing from checkpoint)");
      continue;
    }
    const auto& got = c.trunk.tensors[static_cast<std::size_t>(it - c.trunk.names.begin())].shape();
    if (got != ref.tensors[i].shape()) {
      out.push_back("~ trunk/" + ref.names[i] + " checkpoint " + to_string(got) + " | config " + to_string(ref.tensors[i].shape()));
    }
  }
  for (const auto& name : c.trunk.names) {
    if (std::find(ref.names.begin(), ref.names.end(), name) == ref.names.end()) out.push_back("+ trunk/" + name + " (not in config)");
  }
  return out;
}

}  // namespace lldiff
