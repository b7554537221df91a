#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "audioslots/errors.hpp"

namespace audioslots {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array. Rank 0 is a scalar with one element.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() : data(1, T{0}) {}

  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(numel(shape), fill) {
    for (auto d : shape) detail::require_shape(d > 0, "tensor dimensions must be positive: " + to_string(shape));
  }

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    for (auto d : shape) detail::require_shape(d > 0, "tensor dimensions must be positive: " + to_string(shape));
    detail::require_shape(data.size() == numel(shape),
                          "data length " + std::to_string(data.size()) + " does not match shape " + to_string(shape));
  }

  static Tensor scalar(T v) {
    Tensor t;
    t.data[0] = v;
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T item() const {
    detail::require_shape(data.size() == 1, "item() on non-scalar tensor " + to_string(shape));
    return data[0];
  }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

template <class U, class T>
Tensor<U> tensor_cast(const Tensor<T>& t) {
  Tensor<U> out;
  out.shape = t.shape;
  out.data.assign(t.data.begin(), t.data.end());
  return out;
}

namespace detail {

inline std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Trailing-dimension broadcasting between two shapes. Strides are given per
// output dimension; a broadcast dimension has stride 0.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.assign(r, 1);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ia = i + a.size(), ib = i + b.size();
    const std::size_t da = ia >= r ? a[ia - r] : 1;
    const std::size_t db = ib >= r ? b[ib - r] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcast-compatible");
    p.out[i] = std::max(da, db);
    if (ia >= r && da != 1) p.stride_a[i] = sa[ia - r];
    if (ib >= r && db != 1) p.stride_b[i] = sb[ib - r];
  }
  return p;
}

// Calls f(out_index, a_offset, b_offset) for every output element in
// row-major order.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.out.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = p.out[r - 1];
  const std::size_t ia = p.stride_a[r - 1], ib = p.stride_b[r - 1];
  const std::size_t outer = numel(p.out) / inner;
  std::vector<std::size_t> idx(r - 1, 0);
  std::size_t oa = 0, ob = 0, o = 0;
  for (std::size_t n = 0; n < outer; ++n) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, oa + j * ia, ob + j * ib);
    o += inner;
    for (std::size_t k = r - 1; k-- > 0;) {
      if (++idx[k] < p.out[k]) {
        oa += p.stride_a[k];
        ob += p.stride_b[k];
        break;
      }
      oa -= p.stride_a[k] * (p.out[k] - 1);
      ob -= p.stride_b[k] * (p.out[k] - 1);
      idx[k] = 0;
    }
  }
}

}  // namespace detail
}  // namespace audioslots
