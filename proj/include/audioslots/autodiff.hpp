#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation executed on Vars that belong to it. Each
// recorded node keeps its forward value and, when any of its inputs requires
// a gradient, a closure that pushes the node's output gradient back to its
// inputs. backward() walks the record once in reverse order.
//
// Everything is templated on the scalar type: float for training and
// inference, double for finite-difference gradient checks.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "audioslots/errors.hpp"
#include "audioslots/tensor.hpp"

namespace audioslots::ad {

namespace detail {
using audioslots::detail::require;
using audioslots::detail::require_shape;
}  // namespace detail

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T{0}); }
};

template <class T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape; }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t rank() const { return shape().size(); }
  std::size_t id() const { return id_; }
  Tape<T>* tape() const { return tape_; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// When enabled, every recorded forward value is scanned for NaN/Inf.
  void set_check_finite(bool on) { check_finite_ = on; }

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, nullptr, nullptr); }
  Var<T> variable(Tensor<T> v) { return push(std::move(v), true, nullptr, nullptr); }
  Var<T> parameter(Parameter<T>& p) {
    return grad_enabled_ ? push(p.value, true, nullptr, &p) : push(p.value, false, nullptr, nullptr);
  }

  /// With gradients disabled, parameters enter as constants and no backward
  /// closures are kept. Used for inference.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) {
      detail::require(in.tape() == this, "operand belongs to a different tape");
      rg = rg || requires_grad(in.id());
    }
    return push(std::move(value), rg, rg ? std::move(fn) : nullptr, nullptr);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor<T>& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape);
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Accumulates `g` into the gradient of node `id` if it requires one.
  void accumulate(std::size_t id, const std::vector<T>& g) {
    if (!requires_grad(id)) return;
    auto& dst = grad_ref(id).data;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  /// As above, but adopts the buffer when no gradient exists yet.
  void accumulate(std::size_t id, std::vector<T>&& g) {
    if (!requires_grad(id)) return;
    Node& n = nodes_[id];
    if (!n.has_grad && g.size() == n.value.size()) {
      n.grad.shape = n.value.shape;
      n.grad.data = std::move(g);
      n.has_grad = true;
      return;
    }
    auto& dst = grad_ref(id).data;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Reverse pass from a scalar loss. Parameter leaves add their gradient
  /// into Parameter::grad. A tape supports exactly one backward pass.
  void backward(Var<T> loss, T seed = T{1}) {
    detail::require(loss.tape() == this, "loss belongs to a different tape");
    detail::require(loss.value().size() == 1, "backward() requires a scalar loss, got shape " + to_string(loss.shape()));
    detail::require(!backward_done_, "backward() already ran on this tape");
    backward_done_ = true;
    if (!requires_grad(loss.id())) return;
    grad_ref(loss.id()).data[0] = seed;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.has_grad) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param) {
        auto& dst = n.param->grad.data;
        const auto& src = nodes_[id].grad.data;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }

  /// Gradient of a node after backward(); zeros if nothing flowed into it.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_[v.id()];
    return n.has_grad ? n.grad : Tensor<T>(n.value.shape);
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  Var<T> push(Tensor<T> v, bool rg, BackwardFn fn, Parameter<T>* p) {
    if (check_finite_ && !v.all_finite())
      throw NumericError("non-finite value produced at tape node " + std::to_string(nodes_.size()));
    Node n;
    n.value = std::move(v);
    n.requires_grad = rg;
    n.backward = std::move(fn);
    n.param = p;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool check_finite_ = true;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

template <class T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  detail::require(a.tape() == b.tape() && a.tape() != nullptr, "operands belong to different tapes");
  return *a.tape();
}

// Sums a gradient laid out on the broadcast output shape back onto an
// operand's shape, using 64-bit accumulators.
template <class T>
std::vector<T> reduce_to(const audioslots::detail::BroadcastPlan& p, const std::vector<T>& g, bool for_a,
                         std::size_t operand_size) {
  const auto& strides = for_a ? p.stride_a : p.stride_b;
  // Operand occupies a contiguous trailing block of the output: block sums.
  std::size_t inner = 1, k = p.out.size();
  while (k > 0 && strides[k - 1] == inner) inner *= p.out[--k];
  bool outer_broadcast = true;
  for (std::size_t i = 0; i < k; ++i) outer_broadcast = outer_broadcast && strides[i] == 0;
  if (outer_broadcast && inner == operand_size) {
    std::vector<double> acc(operand_size, 0.0);
    for (std::size_t o = 0; o < g.size(); o += inner)
      for (std::size_t i = 0; i < inner; ++i) acc[i] += static_cast<double>(g[o + i]);
    return std::vector<T>(acc.begin(), acc.end());
  }
  std::vector<double> acc(operand_size, 0.0);
  audioslots::detail::for_each_broadcast(p, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    acc[for_a ? ia : ib] += static_cast<double>(g[o]);
  });
  return std::vector<T>(acc.begin(), acc.end());
}

enum class BinOp { Add, Sub, Mul };

template <class T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinOp op) {
  Tape<T>& tape = same_tape(a, b);
  const auto plan = audioslots::detail::plan_broadcast(a.shape(), b.shape());
  Tensor<T> out(plan.out);
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  auto& ov = out.data;
  if (a.shape() == b.shape()) {
    const std::size_t n = ov.size();
    if (op == BinOp::Add)
      for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
    else if (op == BinOp::Sub)
      for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i];
    else
      for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
  } else switch (op) {
    case BinOp::Add:
      audioslots::detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] + bv[j]; });
      break;
    case BinOp::Sub:
      audioslots::detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] - bv[j]; });
      break;
    case BinOp::Mul:
      audioslots::detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] * bv[j]; });
      break;
  }
  const std::size_t ida = a.id(), idb = b.id();
  return tape.record(std::move(out), {a, b}, [plan, ida, idb, op](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self).data;
    const bool same_a = t.value(ida).shape == plan.out;
    const bool same_b = t.value(idb).shape == plan.out;
    if (t.wants_grad(ida)) {
      if (op == BinOp::Mul) {
        const auto& bv = t.value(idb).data;
        std::vector<T> ga(g.size());
        audioslots::detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t, std::size_t j) { ga[o] = g[o] * bv[j]; });
        t.accumulate(ida, same_a ? std::move(ga) : reduce_to(plan, ga, true, t.value(ida).size()));
      } else {
        t.accumulate(ida, same_a ? g : reduce_to(plan, g, true, t.value(ida).size()));
      }
    }
    if (t.wants_grad(idb)) {
      std::vector<T> gb(g.size());
      if (op == BinOp::Mul) {
        const auto& av = t.value(ida).data;
        audioslots::detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t) { gb[o] = g[o] * av[i]; });
      } else if (op == BinOp::Sub) {
        for (std::size_t o = 0; o < g.size(); ++o) gb[o] = -g[o];
      } else {
        gb = g;
      }
      t.accumulate(idb, same_b ? std::move(gb) : reduce_to(plan, gb, false, t.value(idb).size()));
    }
  });
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, detail::BinOp::Add);
}
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, detail::BinOp::Sub);
}
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, detail::BinOp::Mul);
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= c;
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, c](Tape<T>& t, std::size_t self) {
    std::vector<T> g = t.grad_ref(self).data;
    for (auto& v : g) v *= c;
    t.accumulate(ia, std::move(g));
  });
}

/// Rectified linear unit; the derivative at exactly 0 is taken as 0.
template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = v > T{0} ? v : T{0};
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& x = t.value(ia).data;
    std::vector<T> g = t.grad_ref(self).data;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!(x[i] > T{0})) g[i] = T{0};
    t.accumulate(ia, std::move(g));
  });
}

/// Elementwise x^p for a constant exponent.
template <class T>
Var<T> power(const Var<T>& a, T p) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = std::pow(v, p);
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, p](Tape<T>& t, std::size_t self) {
    const auto& x = t.value(ia).data;
    std::vector<T> g = t.grad_ref(self).data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= p * std::pow(x[i], p - T{1});
    t.accumulate(ia, g);
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().data) acc += static_cast<double>(v);
  const std::size_t ia = a.id();
  const std::size_t n = a.value().size();
  return a.tape()->record(Tensor<T>::scalar(static_cast<T>(acc)), {a}, [ia, n](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, std::vector<T>(n, t.grad_ref(self).data[0]));
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const std::size_t n = a.value().size();
  double acc = 0.0;
  for (T v : a.value().data) acc += static_cast<double>(v);
  const std::size_t ia = a.id();
  return a.tape()->record(Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n))), {a},
                          [ia, n](Tape<T>& t, std::size_t self) {
                            const T g = t.grad_ref(self).data[0] / static_cast<T>(n);
                            t.accumulate(ia, std::vector<T>(n, g));
                          });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  detail::require_shape(numel(shape) == a.value().size(),
                        "cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  Tensor<T> out(std::move(shape), a.value().data);
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {a},
                          [ia](Tape<T>& t, std::size_t self) { t.accumulate(ia, t.grad_ref(self).data); });
}

namespace detail {

// Index map for an axis permutation: out[o] = in[src[o]].
inline std::vector<std::size_t> permutation_sources(const Shape& in, const std::vector<std::size_t>& axes,
                                                    Shape& out_shape) {
  const std::size_t r = in.size();
  out_shape.assign(r, 0);
  std::vector<bool> seen(r, false);
  for (std::size_t k = 0; k < r; ++k) {
    require_shape(axes[k] < r && !seen[axes[k]], "invalid axis permutation");
    seen[axes[k]] = true;
    out_shape[k] = in[axes[k]];
  }
  const auto in_strides = audioslots::detail::contiguous_strides(in);
  std::vector<std::size_t> src(numel(in));
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < src.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < r; ++k) off += idx[k] * in_strides[axes[k]];
    src[o] = off;
    for (std::size_t k = r; k-- > 0;) {
      if (++idx[k] < out_shape[k]) break;
      idx[k] = 0;
    }
  }
  return src;
}

}  // namespace detail

/// Reorders axes: output axis k is input axis axes[k].
template <class T>
Var<T> permute(const Var<T>& a, const std::vector<std::size_t>& axes) {
  detail::require_shape(axes.size() == a.rank(), "permutation rank mismatch");
  Shape out_shape;
  auto src = detail::permutation_sources(a.shape(), axes, out_shape);
  Tensor<T> out(out_shape);
  const auto& in = a.value().data;
  for (std::size_t o = 0; o < src.size(); ++o) out.data[o] = in[src[o]];
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, src = std::move(src)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self).data;
    std::vector<T> gi(g.size());
    for (std::size_t o = 0; o < g.size(); ++o) gi[src[o]] = g[o];
    t.accumulate(ia, gi);
  });
}

/// Swaps the last two axes.
template <class T>
Var<T> transpose(const Var<T>& a) {
  detail::require_shape(a.rank() >= 2, "transpose needs rank >= 2");
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, axes);
}

/// Batched matrix product. a: [..., M, K]; b: [K, N] shared across the batch,
/// or [..., K, N] with the same leading dims as a. Each batch entry is an
/// independent product, so results do not depend on batch position.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  detail::require_shape(a.rank() >= 2 && b.rank() >= 2, "matmul operands need rank >= 2");
  const std::size_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
  const std::size_t K2 = b.dim(b.rank() - 2), N = b.dim(b.rank() - 1);
  detail::require_shape(K == K2, "matmul inner dimensions disagree: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const bool shared_b = b.rank() == 2;
  if (!shared_b)
    detail::require_shape(b.rank() == a.rank() && std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()),
                          "matmul batch dimensions disagree: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t batches = a.value().size() / (M * K);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor<T> out(out_shape);
  const T* A = a.value().data.data();
  const T* B = b.value().data.data();
  T* C = out.data.data();
  for (std::size_t n = 0; n < batches; ++n) {
    detail::MutMap<T> c(C + n * M * N, M, N);
    c.noalias() = detail::ConstMap<T>(A + n * M * K, M, K) * detail::ConstMap<T>(B + (shared_b ? 0 : n * K * N), K, N);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
    const T* G = t.grad_ref(self).data.data();
    const T* Av = t.value(ia).data.data();
    const T* Bv = t.value(ib).data.data();
    if (t.wants_grad(ia)) {
      T* GA = t.grad_ref(ia).data.data();
      for (std::size_t n = 0; n < batches; ++n) {
        detail::MutMap<T> ga(GA + n * M * K, M, K);
        ga.noalias() += detail::ConstMap<T>(G + n * M * N, M, N) *
                        detail::ConstMap<T>(Bv + (shared_b ? 0 : n * K * N), K, N).transpose();
      }
    }
    if (t.wants_grad(ib)) {
      T* GB = t.grad_ref(ib).data.data();
      for (std::size_t n = 0; n < batches; ++n) {
        detail::MutMap<T> gb(GB + (shared_b ? 0 : n * K * N), K, N);
        gb.noalias() += detail::ConstMap<T>(Av + n * M * K, M, K).transpose() * detail::ConstMap<T>(G + n * M * N, M, N);
      }
    }
  });
}

struct Conv2dGeometry {
  std::size_t c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out;
};

namespace detail {

// Output columns [lo, hi) whose input column ox * stride + kj - pad lies
// inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_columns(const Conv2dGeometry& g, std::size_t kj) {
  std::size_t lo = 0;
  if (g.pad > kj) lo = (g.pad - kj + g.stride - 1) / g.stride;
  std::size_t hi = 0;
  if (g.w + g.pad > kj) hi = std::min(g.w_out, (g.w + g.pad - kj - 1) / g.stride + 1);
  return {std::min(lo, hi), hi};
}

template <class T>
void im2col(const T* x, const Conv2dGeometry& g, T* col) {
  const std::size_t hw_out = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * hw_out;
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oy * g.w_out;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.w_out, T{0});
            continue;
          }
          const T* src = x + static_cast<std::ptrdiff_t>((c * g.h + static_cast<std::size_t>(iy)) * g.w + kj) -
                          static_cast<std::ptrdiff_t>(g.pad);
          std::fill(dst, dst + lo, T{0});
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.w_out, T{0});
        }
      }
}

template <class T>
void col2im(const T* col, const Conv2dGeometry& g, T* dx) {
  const std::size_t hw_out = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * hw_out;
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = dx + static_cast<std::ptrdiff_t>((c * g.h + static_cast<std::size_t>(iy)) * g.w + kj) -
                   static_cast<std::ptrdiff_t>(g.pad);
          const T* src = row + oy * g.w_out;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation of x [C_in, H, W] with k [C_out, C_in, kh, kw].
/// Output [C_out, H', W'] with H' = floor((H + 2p - kh) / stride) + 1.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, std::size_t stride, std::size_t pad) {
  Tape<T>& tape = detail::same_tape(x, k);
  detail::require_shape(x.rank() == 3, "conv2d input must be [C, H, W], got " + to_string(x.shape()));
  detail::require_shape(k.rank() == 4, "conv2d kernel must be [C_out, C_in, kh, kw], got " + to_string(k.shape()));
  detail::require_shape(k.dim(1) == x.dim(0), "conv2d channel mismatch: input " + to_string(x.shape()) +
                                                   ", kernel " + to_string(k.shape()));
  detail::require(stride >= 1, "conv2d stride must be >= 1");
  Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), k.dim(0), k.dim(2), k.dim(3), stride, pad, 0, 0};
  detail::require_shape(g.kh % 2 == 1 && g.kw % 2 == 1, "conv2d kernel sizes must be odd");
  detail::require_shape(g.kh <= g.h + 2 * pad && g.kw <= g.w + 2 * pad,
                        "conv2d kernel larger than padded input");
  g.h_out = (g.h + 2 * pad - g.kh) / stride + 1;
  g.w_out = (g.w + 2 * pad - g.kw) / stride + 1;
  const std::size_t rows = g.c_in * g.kh * g.kw, cols = g.h_out * g.w_out;
  std::vector<T> col(rows * cols);
  detail::im2col(x.value().data.data(), g, col.data());
  Tensor<T> out({g.c_out, g.h_out, g.w_out});
  detail::MutMap<T>(out.data.data(), g.c_out, cols).noalias() =
      detail::ConstMap<T>(k.value().data.data(), g.c_out, rows) * detail::ConstMap<T>(col.data(), rows, cols);
  const std::size_t ix = x.id(), ik = k.id();
  if (!x.requires_grad() && !k.requires_grad()) return tape.constant(std::move(out));
  return tape.record(std::move(out), {x, k}, [=, col = std::move(col)](Tape<T>& t, std::size_t self) mutable {
    detail::ConstMap<T> gy(t.grad_ref(self).data.data(), g.c_out, cols);
    if (t.wants_grad(ik))
      detail::MutMap<T>(t.grad_ref(ik).data.data(), g.c_out, rows).noalias() +=
          gy * detail::ConstMap<T>(col.data(), rows, cols).transpose();
    if (t.wants_grad(ix)) {
      detail::MutMap<T>(col.data(), rows, cols).noalias() =
          detail::ConstMap<T>(t.value(ik).data.data(), g.c_out, rows).transpose() * gy;
      detail::col2im(col.data(), g, t.grad_ref(ix).data.data());
    }
  });
}

/// Softmax along one axis, max-shifted for stability; sums in 64 bits.
template <class T>
Var<T> softmax(const Var<T>& a, long axis = -1) {
  const long r = static_cast<long>(a.rank());
  if (axis < 0) axis += r;
  detail::require_shape(axis >= 0 && axis < r, "softmax axis out of range");
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (long i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (long i = axis + 1; i < r; ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::size_t len = s[static_cast<std::size_t>(axis)];
  Tensor<T> out(s);
  const auto& x = a.value().data;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = x[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0.0;
      std::vector<double> e(len);
      for (std::size_t k = 0; k < len; ++k) {
        e[k] = std::exp(static_cast<double>(x[base + k * inner] - mx));
        z += e[k];
      }
      for (std::size_t k = 0; k < len; ++k) out.data[base + k * inner] = static_cast<T>(e[k] / z);
    }
  const std::size_t ia = a.id(), self_outer = outer, self_inner = inner;
  return a.tape()->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const auto& y = t.value(self).data;
    const auto& g = t.grad_ref(self).data;
    std::vector<T> gx(g.size());
    for (std::size_t o = 0; o < self_outer; ++o)
      for (std::size_t in = 0; in < self_inner; ++in) {
        const std::size_t base = o * len * self_inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k)
          dot += static_cast<double>(g[base + k * self_inner]) * static_cast<double>(y[base + k * self_inner]);
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * self_inner;
          gx[i] = static_cast<T>(static_cast<double>(y[i]) * (static_cast<double>(g[i]) - dot));
        }
      }
    t.accumulate(ia, gx);
  });
}

namespace detail {

// Shared normalization kernel. Elements are split into `groups` contiguous
// blocks; within a block, runs of `affine_stride` elements share one affine
// entry, cycling through the `affine_len` scale/bias entries.
template <class T>
Var<T> normalize_groups(const Var<T>& x, const Var<T>& scale, const Var<T>& bias, std::size_t groups,
                        std::size_t affine_stride, T eps) {
  Tape<T>& tape = same_tape(x, scale);
  same_tape(x, bias);
  const std::size_t total = x.value().size();
  const std::size_t group_len = total / groups;
  const std::size_t affine_len = scale.value().size();
  const std::size_t runs = total / affine_stride;
  require_shape(bias.value().size() == affine_len, "normalization scale/bias size mismatch");
  const auto& xv = x.value().data;
  const auto& gv = scale.value().data;
  const auto& bv = bias.value().data;
  std::vector<T> xhat(total);
  std::vector<double> rstd(groups);
  Tensor<T> out(x.shape());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t base = gi * group_len;
    double m = 0.0;
    for (std::size_t i = 0; i < group_len; ++i) m += static_cast<double>(xv[base + i]);
    m /= static_cast<double>(group_len);
    double var = 0.0;
    for (std::size_t i = 0; i < group_len; ++i) {
      const double d = static_cast<double>(xv[base + i]) - m;
      var += d * d;
    }
    var /= static_cast<double>(group_len);
    rstd[gi] = 1.0 / std::sqrt(var + static_cast<double>(eps));
    const T mt = static_cast<T>(m), rt = static_cast<T>(rstd[gi]);
    for (std::size_t i = 0; i < group_len; ++i) xhat[base + i] = (xv[base + i] - mt) * rt;
  }
  for (std::size_t r = 0; r < runs; ++r) {
    const std::size_t c = r % affine_len, off = r * affine_stride;
    for (std::size_t i = 0; i < affine_stride; ++i) out.data[off + i] = xhat[off + i] * gv[c] + bv[c];
  }
  const std::size_t ix = x.id(), is = scale.id(), ib = bias.id();
  return tape.record(std::move(out), {x, scale, bias},
                     [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_ref(self).data;
                       const auto& gam = t.value(is).data;
                       if (t.wants_grad(is) || t.wants_grad(ib)) {
                         std::vector<double> ds(affine_len, 0.0), db(affine_len, 0.0);
                         for (std::size_t r = 0; r < runs; ++r) {
                           const std::size_t c = r % affine_len, off = r * affine_stride;
                           double a = 0.0, b = 0.0;
                           for (std::size_t i = 0; i < affine_stride; ++i) {
                             a += static_cast<double>(g[off + i]) * static_cast<double>(xhat[off + i]);
                             b += static_cast<double>(g[off + i]);
                           }
                           ds[c] += a;
                           db[c] += b;
                         }
                         t.accumulate(is, std::vector<T>(ds.begin(), ds.end()));
                         t.accumulate(ib, std::vector<T>(db.begin(), db.end()));
                       }
                       if (!t.wants_grad(ix)) return;
                       // dxhat = g * gamma
                       std::vector<T> d(total);
                       for (std::size_t r = 0; r < runs; ++r) {
                         const std::size_t c = r % affine_len, off = r * affine_stride;
                         for (std::size_t i = 0; i < affine_stride; ++i) d[off + i] = g[off + i] * gam[c];
                       }
                       auto& gx = t.grad_ref(ix).data;
                       for (std::size_t gi = 0; gi < groups; ++gi) {
                         const std::size_t base = gi * group_len;
                         double mean_d = 0.0, mean_dx = 0.0;
                         for (std::size_t i = 0; i < group_len; ++i) {
                           mean_d += static_cast<double>(d[base + i]);
                           mean_dx += static_cast<double>(d[base + i]) * static_cast<double>(xhat[base + i]);
                         }
                         mean_d /= static_cast<double>(group_len);
                         mean_dx /= static_cast<double>(group_len);
                         for (std::size_t i = 0; i < group_len; ++i)
                           gx[base + i] += static_cast<T>(
                               rstd[gi] * (static_cast<double>(d[base + i]) - mean_d -
                                           static_cast<double>(xhat[base + i]) * mean_dx));
                       }
                     });
}

}  // namespace detail

/// Layer normalization over the last axis with per-feature affine.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& scale, const Var<T>& bias, T eps = T(1e-5)) {
  detail::require_shape(x.rank() >= 1, "layer_norm needs rank >= 1");
  const std::size_t d = x.dim(x.rank() - 1);
  detail::require_shape(scale.value().size() == d, "layer_norm scale must match the last dimension");
  return detail::normalize_groups(x, scale, bias, x.value().size() / d, 1, eps);
}

/// Group normalization of x [C, ...] over `groups` channel groups with
/// per-channel affine.
template <class T>
Var<T> group_norm(const Var<T>& x, std::size_t groups, const Var<T>& scale, const Var<T>& bias, T eps = T(1e-5)) {
  detail::require_shape(x.rank() >= 2, "group_norm input must be [C, ...]");
  const std::size_t c = x.dim(0);
  detail::require_shape(groups >= 1 && c % groups == 0,
                        "group count " + std::to_string(groups) + " does not divide channel count " + std::to_string(c));
  detail::require_shape(scale.value().size() == c, "group_norm scale must have one entry per channel");
  return detail::normalize_groups(x, scale, bias, groups, x.value().size() / c, eps);
}

/// Rows of a along axis 0, in the given order.
template <class T>
Var<T> gather_rows(const Var<T>& a, const std::vector<std::size_t>& rows) {
  detail::require_shape(a.rank() >= 1, "gather_rows needs rank >= 1");
  const std::size_t n = a.dim(0), stride = a.value().size() / n;
  Shape s = a.shape();
  s[0] = rows.size();
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    detail::require_shape(rows[r] < n, "gather_rows index out of range");
    std::copy_n(a.value().data.begin() + static_cast<long>(rows[r] * stride), stride,
                out.data.begin() + static_cast<long>(r * stride));
  }
  const std::size_t ia = a.id(), total = a.value().size();
  return a.tape()->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self).data;
    std::vector<T> ga(total, T{0});
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t k = 0; k < stride; ++k) ga[rows[r] * stride + k] += g[r * stride + k];
    t.accumulate(ia, ga);
  });
}

/// Concatenation along axis 0.
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows needs at least one operand");
  Tape<T>& tape = *parts[0].tape();
  Shape s = parts[0].shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require_shape(p.tape() == &tape, "operands belong to different tapes");
    detail::require_shape(p.rank() == s.size() && std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1),
                          "concat_rows trailing shapes disagree");
    rows += p.dim(0);
  }
  s[0] = rows;
  Tensor<T> out(s);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<long>(off));
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.value().size();
  }
  // record() takes an initializer list, so chain through a single node whose
  // requires_grad reflects every part.
  bool rg = false;
  for (const auto& p : parts) rg = rg || p.requires_grad();
  Var<T> anchor = rg ? *std::find_if(parts.begin(), parts.end(), [](const Var<T>& p) { return p.requires_grad(); })
                     : parts[0];
  return tape.record(std::move(out), {anchor}, [ids, offsets](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self).data;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const std::size_t n = t.value(ids[i]).size();
      t.accumulate(ids[i], std::vector<T>(g.begin() + static_cast<long>(offsets[i]),
                                          g.begin() + static_cast<long>(offsets[i] + n)));
    }
  });
}

}  // namespace audioslots::ad
