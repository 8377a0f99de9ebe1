// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <vector>

#include "lldiff/tape.hpp"

namespace lldiff {

/// Thin SVD of a row-major m x n matrix: A = U diag(sigma) V^T with
/// r = min(m, n) columns in U (m x r) and V (n x r), sigma descending.
struct ThinSvd {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> sigma;
  std::vector<double> u;  // row-major m x r
  std::vector<double> v;  // row-major n x r
  int sweeps = 0;
};

namespace detail {

/// One-sided (Hestenes) Jacobi on the columns of a tall row-major matrix
/// (rows >= cols). Returns column norms as singular values.
inline ThinSvd jacobi_tall(std::vector<double> a, std::size_t m, std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  // Orthogonality tolerance scaled with the row count; columns whose norm has
  // collapsed to rounding noise relative to the whole matrix are left alone,
  // otherwise rank-deficient inputs rotate forever.
  const double eps = std::numeric_limits<double>::epsilon();
  const double tol = eps * static_cast<double>(std::max<std::size_t>(m, 1));
  double fro2 = 0.0;
  for (double x : a) fro2 += x * x;
  const double negligible = eps * eps * fro2;
  const int max_sweeps = static_cast<int>(100 * std::min(m, n));
  int sweep = 0;
  bool converged = n <= 1;
  while (!converged && sweep < max_sweeps) {
    ++sweep;
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t r = 0; r < m; ++r) {
          const double ap = a[r * n + p], aq = a[r * n + q];
          alpha += ap * ap;
          beta += aq * aq;
          gamma += ap * aq;
        }
        if (gamma == 0.0 || alpha <= negligible || beta <= negligible) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t r = 0; r < m; ++r) {
          const double ap = a[r * n + p], aq = a[r * n + q];
          a[r * n + p] = c * ap - s * aq;
          a[r * n + q] = s * ap + c * aq;
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double vp = v[r * n + p], vq = v[r * n + q];
          v[r * n + p] = c * vp - s * vq;
          v[r * n + q] = s * vp + c * vq;
        }
      }
    }
  }
  if (!converged) {
    double fro = 0.0, maxabs = 0.0;
    for (double x : a) {
      fro += x * x;
      maxabs = std::max(maxabs, std::abs(x));
    }
    std::ostringstream os;
    os << "SVD did not converge after " << sweep << " sweeps on " << m << "x" << n
       << " matrix (frobenius norm " << std::sqrt(fro) << ", max |entry| " << maxabs << ")";
    throw NumericalError(os.str());
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t r = 0; r < m; ++r) s += a[r * n + j] * a[r * n + j];
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return norms[i] > norms[j]; });

  ThinSvd out;
  out.rows = m;
  out.cols = n;
  out.sweeps = sweep;
  out.sigma.resize(n);
  out.u.assign(m * n, 0.0);
  out.v.assign(n * n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.sigma[k] = norms[j];
    // Null directions get a zero left vector; they carry no gradient.
    if (norms[j] > 0.0) {
      for (std::size_t r = 0; r < m; ++r) out.u[r * n + k] = a[r * n + j] / norms[j];
    }
    for (std::size_t r = 0; r < n; ++r) out.v[r * n + k] = v[r * n + j];
  }
  return out;
}

}  // namespace detail

/// Thin SVD computed in double precision.
template <typename T>
ThinSvd thin_svd(std::span<const T> a, std::size_t m, std::size_t n) {
  if (m == 0 || n == 0 || a.size() != m * n) throw DimensionError("thin_svd: bad matrix dimensions");
  for (const T& x : a) {
    if (!std::isfinite(static_cast<double>(x))) throw NumericalError("thin_svd: non-finite matrix entry");
  }
  if (m >= n) return detail::jacobi_tall(std::vector<double>(a.begin(), a.end()), m, n);
  std::vector<double> at(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) at[c * m + r] = static_cast<double>(a[r * n + c]);
  }
  ThinSvd t = detail::jacobi_tall(std::move(at), n, m);
  ThinSvd out;
  out.rows = m;
  out.cols = n;
  out.sweeps = t.sweeps;
  out.sigma = std::move(t.sigma);
  out.u = std::move(t.v);
  out.v = std::move(t.u);
  return out;
}

/// Singular values of a rank-2 Var, descending. Backward applies
/// dL/dM = sum_i g_i u_i v_i^T, which is exact because only the spectrum
/// (never U or V) is exposed downstream.
template <typename T>
Var<T> singular_values(Var<T> m) {
  const Tensor<T>& mv = m.value();
  if (mv.rank() != 2) throw DimensionError("singular_values expects a matrix, got " + to_string(mv.shape()));
  const std::size_t rows = mv.dim(0), cols = mv.dim(1);
  ThinSvd svd = thin_svd<T>(mv.data(), rows, cols);
  const std::size_t r = svd.sigma.size();
  Tensor<T> out({r});
  for (std::size_t i = 0; i < r; ++i) out[i] = static_cast<T>(svd.sigma[i]);
  const std::size_t im = m.id;
  return m.tape->record(std::move(out), m.requires_grad(),
                        [im, svd = std::move(svd)](Tape<T>& tp, std::size_t self) {
                          const auto& g = tp.grad_of(self);
                          auto& d = tp.grad_of(im);
                          const std::size_t rows = svd.rows, cols = svd.cols, k = svd.sigma.size();
                          for (std::size_t a = 0; a < rows; ++a) {
                            for (std::size_t b = 0; b < cols; ++b) {
                              double acc = 0.0;
                              for (std::size_t i = 0; i < k; ++i) {
                                acc += static_cast<double>(g[i]) * svd.u[a * k + i] * svd.v[b * k + i];
                              }
                              d[a * cols + b] += static_cast<T>(acc);
                            }
                          }
                        });
}

}  // namespace lldiff
