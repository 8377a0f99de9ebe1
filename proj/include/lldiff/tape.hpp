// Copyright 2026 The lldiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lldiff/tensor.hpp"

namespace lldiff {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning Tape is alive.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers and a single reverse sweep visits each node once. Each node's
/// backward closure reads its own gradient and accumulates into its inputs.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value) { return push(std::move(value), true, nullptr); }
  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// Appends an op result. `backward` is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, bool requires_grad, Backward backward) {
    return push(std::move(value), requires_grad, requires_grad ? std::move(backward) : nullptr);
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor<T>& value_of(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad_of(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of node `id`, zero-initialised on first access.
  std::vector<T>& grad_of(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }

  /// Gradient of the last backward() root with respect to `v`; zeros if
  /// nothing flowed into it.
  std::vector<T> grad(Var<T> v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.empty()) return std::vector<T>(n.value.size(), T{0});
    return n.grad;
  }

  Tensor<T> grad_tensor(Var<T> v) const { return Tensor<T>(value(v).shape(), grad(v)); }

  /// Reverse sweep from a scalar root.
  void backward(Var<T> root) {
    if (value(root).size() != 1) {
      throw DimensionError("backward() root must be a scalar, got " + to_string(value(root).shape()));
    }
    for (auto& n : nodes_) n.grad.clear();
    grad_of(root.id)[0] = T{1};
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(backward)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
void check_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw std::logic_error("vars belong to different tapes");
}

enum class Broadcast { kNone, kLeftScalar, kRightScalar };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (b.size() == 1) return Broadcast::kRightScalar;
  if (a.size() == 1) return Broadcast::kLeftScalar;
  throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                       to_string(b.shape()) + " are not broadcast-compatible");
}

/// Adds `g` into the gradient of `id`, reducing to a scalar when `id` was broadcast.
template <typename T>
void accumulate(Tape<T>& tape, std::size_t id, const std::vector<T>& g, bool reduce) {
  if (!tape.requires_grad_of(id)) return;
  auto& dst = tape.grad_of(id);
  if (reduce) {
    double acc = 0.0;
    for (const T& x : g) acc += x;
    dst[0] += static_cast<T>(acc);
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, BinaryKind kind) {
  check_same_tape(a, b);
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const char* name = kind == BinaryKind::kAdd ? "add" : kind == BinaryKind::kSub ? "sub" : "mul";
  const Broadcast bc = broadcast_kind(av, bv, name);
  const Shape& out_shape = bc == Broadcast::kLeftScalar ? bv.shape() : av.shape();
  Tensor<T> out(out_shape);
  const std::size_t n = out.size();
  auto at = [&](const Tensor<T>& t, std::size_t i) { return t.size() == 1 ? t[0] : t[i]; };
  for (std::size_t i = 0; i < n; ++i) {
    const T x = at(av, i), y = at(bv, i);
    out[i] = kind == BinaryKind::kAdd ? x + y : kind == BinaryKind::kSub ? x - y : x * y;
  }
  const bool rg = a.requires_grad() || b.requires_grad();
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), rg, [ia, ib, kind, bc](Tape<T>& tp, std::size_t self) {
    const std::vector<T>& g = tp.grad_of(self);
    const Tensor<T>& av = tp.value_of(ia);
    const Tensor<T>& bv = tp.value_of(ib);
    auto at = [](const Tensor<T>& t, std::size_t i) { return t.size() == 1 ? t[0] : t[i]; };
    std::vector<T> ga(g.size()), gb(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      switch (kind) {
        case BinaryKind::kAdd: ga[i] = g[i]; gb[i] = g[i]; break;
        case BinaryKind::kSub: ga[i] = g[i]; gb[i] = -g[i]; break;
        case BinaryKind::kMul: ga[i] = g[i] * at(bv, i); gb[i] = g[i] * at(av, i); break;
      }
    }
    accumulate(tp, ia, ga, bc == Broadcast::kLeftScalar);
    accumulate(tp, ib, gb, bc == Broadcast::kRightScalar);
  });
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(Var<T> a, Fwd fwd, Deriv deriv) {
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ia = a.id;
  return tape.record(std::move(out), a.requires_grad(), [ia, deriv](Tape<T>& tp, std::size_t self) {
    const std::vector<T>& g = tp.grad_of(self);
    const Tensor<T>& x = tp.value_of(ia);
    const Tensor<T>& y = tp.value_of(self);
    auto& dst = tp.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * deriv(x[i], y[i]);
  });
}

}  // namespace detail

template <typename T> Var<T> add(Var<T> a, Var<T> b) { return detail::binary(a, b, detail::BinaryKind::kAdd); }
template <typename T> Var<T> sub(Var<T> a, Var<T> b) { return detail::binary(a, b, detail::BinaryKind::kSub); }
template <typename T> Var<T> mul(Var<T> a, Var<T> b) { return detail::binary(a, b, detail::BinaryKind::kMul); }

template <typename T>
Var<T> add(Var<T> a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> mul(Var<T> a, T s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> neg(Var<T> a) {
  return detail::unary(a, [](T x) { return -x; }, [](T, T) { return T{-1}; });
}

/// Subgradient at 0 is 0.
template <typename T>
Var<T> abs(Var<T> a) {
  return detail::unary(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T{0} ? T{1} : (x < T{0} ? T{-1} : T{0}); });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

/// x * sigmoid(x)
template <typename T>
Var<T> silu(Var<T> a) {
  return detail::unary(
      a,
      [](T x) { return x / (T{1} + std::exp(-x)); },
      [](T x, T) {
        const T s = T{1} / (T{1} + std::exp(-x));
        return s * (T{1} + x * (T{1} - s));
      });
}

template <typename T>
Var<T> sum(Var<T> a) {
  Tape<T>& tape = *a.tape;
  const double s = sum_of<T>(a.value().data());
  const std::size_t ia = a.id;
  return tape.record(Tensor<T>::scalar(static_cast<T>(s)), a.requires_grad(),
                     [ia](Tape<T>& tp, std::size_t self) {
                       const T g = tp.grad_of(self)[0];
                       for (T& d : tp.grad_of(ia)) d += g;
                     });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.size();
  Tape<T>& tape = *a.tape;
  const double s = sum_of<T>(a.value().data()) / static_cast<double>(n);
  const std::size_t ia = a.id;
  return tape.record(Tensor<T>::scalar(static_cast<T>(s)), a.requires_grad(),
                     [ia, n](Tape<T>& tp, std::size_t self) {
                       const T g = tp.grad_of(self)[0] / static_cast<T>(n);
                       for (T& d : tp.grad_of(ia)) d += g;
                     });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tape<T>& tape = *a.tape;
  const std::size_t ia = a.id;
  return tape.record(a.value().reshaped(std::move(shape)), a.requires_grad(),
                     [ia](Tape<T>& tp, std::size_t self) {
                       const auto& g = tp.grad_of(self);
                       auto& d = tp.grad_of(ia);
                       for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                     });
}

/// Multiplies entry-wise by a constant tensor of the same shape.
template <typename T>
Var<T> mul_const(Var<T> a, const Tensor<T>& w) {
  if (w.shape() != a.shape()) {
    throw DimensionError("mul_const: shapes " + to_string(a.shape()) + " and " + to_string(w.shape()));
  }
  Tape<T>& tape = *a.tape;
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * w[i];
  const std::size_t ia = a.id;
  return tape.record(std::move(out), a.requires_grad(), [ia, w](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& d = tp.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * w[i];
  });
}

}  // namespace lldiff
