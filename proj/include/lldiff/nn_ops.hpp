// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "lldiff/tape.hpp"

namespace lldiff {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

/// Sequential sum of `n` values spaced `stride` apart. Eigen's vectorised
/// reductions peel by address alignment, which varies between runs and
/// changes the last bits of the result.
template <typename T>
T strided_sum(const T* p, std::size_t n, std::size_t stride) {
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) acc += p[i * stride];
  return acc;
}

/// Unfolds one C x H x W image into a (C*k*k) x (H*W) matrix with zero padding.
template <typename T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* col) {
  const long pad = static_cast<long>(k / 2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((ch * k + ky) * k + kx) * h * w;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + static_cast<long>(ky) - pad;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + static_cast<long>(kx) - pad;
            row[y * w + x] = (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w))
                                 ? T{0}
                                 : img[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds columns back into the image gradient.
template <typename T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* img) {
  const long pad = static_cast<long>(k / 2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((ch * k + ky) * k + kx) * h * w;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + static_cast<long>(ky) - pad;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + static_cast<long>(kx) - pad;
            if (sx < 0 || sx >= static_cast<long>(w)) continue;
            img[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] += row[y * w + x];
          }
        }
      }
    }
  }
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + to_string(s));
  }
}

}  // namespace detail

/// Same-padded 2-D cross-correlation. x: N x Ci x H x W, kernel: Co x Ci x k x k
/// (k odd), bias: Co.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias) {
  using detail::ConstMapMat;
  using detail::MapMat;
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  detail::require_rank(xs, 4, "conv2d input");
  detail::require_rank(ks, 4, "conv2d kernel");
  const std::size_t n = xs[0], ci = xs[1], h = xs[2], w = xs[3];
  const std::size_t co = ks[0], k = ks[2];
  if (ks[1] != ci) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(ks[1]) + " input channels, got " +
                         std::to_string(ci));
  }
  if (ks[2] != ks[3] || k % 2 == 0) throw DimensionError("conv2d: kernel must be square with odd size");
  if (bias.shape() != Shape{co}) throw DimensionError("conv2d: bias shape " + to_string(bias.shape()));

  const std::size_t hw = h * w, ckk = ci * k * k;
  auto cols = std::make_shared<std::vector<T>>(n * ckk * hw);
  Tensor<T> out({n, co, h, w});
  ConstMapMat<T> wm(kernel.value().data().data(), co, ckk);
  const T* xd = x.value().data().data();
  const T* bd = bias.value().data().data();
  for (std::size_t b = 0; b < n; ++b) {
    T* col = cols->data() + b * ckk * hw;
    detail::im2col(xd + b * ci * hw, ci, h, w, k, col);
    MapMat<T> om(out.data().data() + b * co * hw, co, hw);
    om.noalias() = wm * ConstMapMat<T>(col, ckk, hw);
    for (std::size_t o = 0; o < co; ++o) om.row(o).array() += bd[o];
  }

  const bool rg = x.requires_grad() || kernel.requires_grad() || bias.requires_grad();
  const std::size_t ix = x.id, ik = kernel.id, ib = bias.id;
  return x.tape->record(std::move(out), rg, [=](Tape<T>& tp, std::size_t self) {
    const std::vector<T>& g = tp.grad_of(self);
    ConstMapMat<T> wm(tp.value_of(ik).data().data(), co, ckk);
    const bool gx = tp.requires_grad_of(ix), gk = tp.requires_grad_of(ik), gb = tp.requires_grad_of(ib);
    detail::RowMat<T> dcol;
    for (std::size_t b = 0; b < n; ++b) {
      ConstMapMat<T> gm(g.data() + b * co * hw, co, hw);
      const T* col = cols->data() + b * ckk * hw;
      if (gk) {
        MapMat<T> dk(tp.grad_of(ik).data(), co, ckk);
        dk.noalias() += gm * ConstMapMat<T>(col, ckk, hw).transpose();
      }
      if (gb) {
        auto& db = tp.grad_of(ib);
        for (std::size_t o = 0; o < co; ++o) db[o] += detail::strided_sum(g.data() + (b * co + o) * hw, hw, 1);
      }
      if (gx) {
        dcol.noalias() = wm.transpose() * gm;
        detail::col2im(dcol.data(), ci, h, w, k, tp.grad_of(ix).data() + b * ci * hw);
      }
    }
  });
}

/// 2x2 mean pooling, stride 2. H and W must be even.
template <typename T>
Var<T> avg_pool2(Var<T> x) {
  const Shape& s = x.shape();
  detail::require_rank(s, 4, "avg_pool2");
  if (s[2] % 2 || s[3] % 2) throw DimensionError("avg_pool2: spatial dims must be even, got " + to_string(s));
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
  Tensor<T> out({s[0], s[1], oh, ow});
  const auto& xv = x.value();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t base = p * h * w + 2 * y * w + 2 * xx;
        out[(p * oh + y) * ow + xx] = T(0.25) * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
      }
    }
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(), [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& d = tp.grad_of(ix);
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const T gv = T(0.25) * g[(p * oh + y) * ow + xx];
          const std::size_t base = p * h * w + 2 * y * w + 2 * xx;
          d[base] += gv;
          d[base + 1] += gv;
          d[base + w] += gv;
          d[base + w + 1] += gv;
        }
      }
    }
  });
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample_nearest2(Var<T> x) {
  const Shape& s = x.shape();
  detail::require_rank(s, 4, "upsample_nearest2");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = 2 * h, ow = 2 * w;
  Tensor<T> out({s[0], s[1], oh, ow});
  const auto& xv = x.value();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) out[(p * oh + y) * ow + xx] = xv[(p * h + y / 2) * w + xx / 2];
    }
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(), [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& d = tp.grad_of(ix);
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) d[(p * h + y / 2) * w + xx / 2] += g[(p * oh + y) * ow + xx];
      }
    }
  });
}

/// Concatenates two NCHW tensors along the channel axis.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  detail::require_rank(as, 4, "concat_channels");
  detail::require_rank(bs, 4, "concat_channels");
  if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
    throw DimensionError("concat_channels: " + to_string(as) + " vs " + to_string(bs));
  }
  const std::size_t n = as[0], ca = as[1], cb = bs[1], hw = as[2] * as[3];
  Tensor<T> out({n, ca + cb, as[2], as[3]});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data().data() + i * ca * hw, ca * hw, out.data().data() + i * (ca + cb) * hw);
    std::copy_n(b.value().data().data() + i * cb * hw, cb * hw, out.data().data() + (i * (ca + cb) + ca) * hw);
  }
  const bool rg = a.requires_grad() || b.requires_grad();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), rg, [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const bool ga = tp.requires_grad_of(ia), gb = tp.requires_grad_of(ib);
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = g.data() + i * (ca + cb) * hw;
      if (ga) {
        T* d = tp.grad_of(ia).data() + i * ca * hw;
        for (std::size_t j = 0; j < ca * hw; ++j) d[j] += src[j];
      }
      if (gb) {
        T* d = tp.grad_of(ib).data() + i * cb * hw;
        for (std::size_t j = 0; j < cb * hw; ++j) d[j] += src[ca * hw + j];
      }
    }
  });
}

/// y = x W^T + b for x: N x In, weight: Out x In, bias: Out.
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  using detail::ConstMapMat;
  using detail::MapMat;
  detail::require_rank(x.shape(), 2, "linear input");
  detail::require_rank(weight.shape(), 2, "linear weight");
  const std::size_t n = x.shape()[0], in = x.shape()[1], out_dim = weight.shape()[0];
  if (weight.shape()[1] != in) throw DimensionError("linear: weight " + to_string(weight.shape()) + " vs input " + to_string(x.shape()));
  if (bias.shape() != Shape{out_dim}) throw DimensionError("linear: bias shape " + to_string(bias.shape()));
  Tensor<T> out({n, out_dim});
  MapMat<T> om(out.data().data(), n, out_dim);
  om.noalias() = ConstMapMat<T>(x.value().data().data(), n, in) *
                 ConstMapMat<T>(weight.value().data().data(), out_dim, in).transpose();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out_dim; ++o) om(i, o) += bias.value()[o];
  }
  const bool rg = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
  const std::size_t ix = x.id, iw = weight.id, ib = bias.id;
  return x.tape->record(std::move(out), rg, [=](Tape<T>& tp, std::size_t self) {
    ConstMapMat<T> gm(tp.grad_of(self).data(), n, out_dim);
    if (tp.requires_grad_of(iw)) {
      MapMat<T>(tp.grad_of(iw).data(), out_dim, in).noalias() +=
          gm.transpose() * ConstMapMat<T>(tp.value_of(ix).data().data(), n, in);
    }
    if (tp.requires_grad_of(ib)) {
      auto& db = tp.grad_of(ib);
      for (std::size_t o = 0; o < out_dim; ++o) db[o] += detail::strided_sum(tp.grad_of(self).data() + o, n, out_dim);
    }
    if (tp.requires_grad_of(ix)) {
      MapMat<T>(tp.grad_of(ix).data(), n, in).noalias() +=
          gm * ConstMapMat<T>(tp.value_of(iw).data().data(), out_dim, in);
    }
  });
}

/// Per-sample, per-channel modulation: y = x * (1 + scale) + shift with
/// scale and shift of shape N x C.
template <typename T>
Var<T> channel_affine(Var<T> x, Var<T> scale, Var<T> shift) {
  const Shape& s = x.shape();
  detail::require_rank(s, 4, "channel_affine");
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  if (scale.shape() != Shape{n, c} || shift.shape() != Shape{n, c}) {
    throw DimensionError("channel_affine: modulation shapes " + to_string(scale.shape()) + ", " +
                         to_string(shift.shape()) + " do not match " + to_string(s));
  }
  Tensor<T> out(s);
  const auto& xv = x.value();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T a = T{1} + scale.value()[p], b = shift.value()[p];
    for (std::size_t j = 0; j < hw; ++j) out[p * hw + j] = xv[p * hw + j] * a + b;
  }
  const bool rg = x.requires_grad() || scale.requires_grad() || shift.requires_grad();
  const std::size_t ix = x.id, is = scale.id, ih = shift.id;
  return x.tape->record(std::move(out), rg, [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const auto& xv = tp.value_of(ix);
    const bool gx = tp.requires_grad_of(ix), gs = tp.requires_grad_of(is), gh = tp.requires_grad_of(ih);
    for (std::size_t p = 0; p < n * c; ++p) {
      double sg = 0.0, sgx = 0.0;
      for (std::size_t j = 0; j < hw; ++j) {
        sg += g[p * hw + j];
        sgx += static_cast<double>(g[p * hw + j]) * xv[p * hw + j];
      }
      if (gs) tp.grad_of(is)[p] += static_cast<T>(sgx);
      if (gh) tp.grad_of(ih)[p] += static_cast<T>(sg);
      if (gx) {
        const T a = T{1} + tp.value_of(is)[p];
        auto& d = tp.grad_of(ix);
        for (std::size_t j = 0; j < hw; ++j) d[p * hw + j] += g[p * hw + j] * a;
      }
    }
  });
}

/// out[i] = x[indices[i]], reshaped to `shape`. Backward scatter-adds.
template <typename T>
Var<T> gather(Var<T> x, std::shared_ptr<const std::vector<std::size_t>> indices, Shape shape) {
  if (numel(shape) != indices->size()) throw DimensionError("gather: index count does not match shape " + to_string(shape));
  const auto& xv = x.value();
  Tensor<T> out(std::move(shape));
  for (std::size_t i = 0; i < indices->size(); ++i) {
    const std::size_t src = (*indices)[i];
    if (src >= xv.size()) throw IndexError("gather: index " + std::to_string(src) + " out of range");
    out[i] = xv[src];
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(), [ix, indices](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& d = tp.grad_of(ix);
    for (std::size_t i = 0; i < g.size(); ++i) d[(*indices)[i]] += g[i];
  });
}

}  // namespace lldiff
