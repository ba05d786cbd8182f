#pragma once

// Forward primitives on plain tensors. The differentiable versions in
// autodiff.hpp reuse these for their forward pass.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <type_traits>

#include "tagbert/tensor.hpp"

namespace tagbert::ops {

template <class T>
using wide_t = std::conditional_t<std::is_same_v<T, float>, double, long double>;

inline void require_rank2(std::string_view op, const Shape& s) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(s));
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2("matmul", a.shape());
  require_rank2("matmul", b.shape());
  if (a.shape()[1] != b.shape()[0]) throw shape_mismatch("matmul", a.shape(), b.shape());
  Tensor<T> c({a.shape()[0], b.shape()[1]});
  kernel::gemm_ab(a.ptr(), b.ptr(), c.ptr(), a.shape()[0], a.shape()[1], b.shape()[1], false);
  return c;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw shape_mismatch("add", a.shape(), b.shape());
  Tensor<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

/// y = x W^T + b with W stored as (out, in).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  require_rank2("linear weight", weight.shape());
  const std::size_t out = weight.shape()[0], in = weight.shape()[1];
  if (x.cols() != in) throw shape_mismatch("linear", x.shape(), weight.shape());
  if (bias && bias->size() != out) throw shape_mismatch("linear bias", weight.shape(), bias->shape());
  Shape shape = x.shape();
  shape.back() = out;
  Tensor<T> y(shape);
  const std::size_t rows = x.rows();
  kernel::gemm_abt(x.ptr(), weight.ptr(), y.ptr(), rows, in, out, false);
  if (bias)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out; ++o) y(r, o) += (*bias)[o];
  return y;
}

struct LayerNormStats {
  std::vector<double> mean, rstd;
};

/// Normalizes every row to zero mean and unit variance (population variance
/// plus eps), then applies gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps,
                     LayerNormStats* stats = nullptr) {
  const std::size_t n = x.cols(), rows = x.rows();
  if (gain.size() != n || bias.size() != n) throw shape_mismatch("layer_norm", x.shape(), gain.shape());
  Tensor<T> y(x.shape());
  if (stats) {
    stats->mean.assign(rows, 0.0);
    stats->rstd.assign(rows, 0.0);
  }
  using W = wide_t<T>;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * n;
    W sum = 0;
    for (std::size_t i = 0; i < n; ++i) sum += xr[i];
    const W mean = sum / static_cast<W>(n);
    W var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<W>(n);
    const W rstd = W{1} / std::sqrt(var + static_cast<W>(eps));
    T* yr = y.ptr() + r * n;
    for (std::size_t i = 0; i < n; ++i)
      yr[i] = static_cast<T>((xr[i] - mean) * rstd) * gain[i] + bias[i];
    if (stats) {
      stats->mean[r] = static_cast<double>(mean);
      stats->rstd[r] = static_cast<double>(rstd);
    }
  }
  return y;
}

template <class T>
inline constexpr T inv_sqrt2 = static_cast<T>(0.70710678118654752440084436210484903928L);

template <class T>
T gelu(T x) {
  return static_cast<T>(0.5) * x * (T{1} + std::erf(x * inv_sqrt2<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = static_cast<T>(0.5) * (T{1} + std::erf(x * inv_sqrt2<T>));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> *
                inv_sqrt2<T>;
  return cdf + x * pdf;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu(x[i]);
  return y;
}

/// Softmax of one row in place; positions with keep[i] == false get exactly 0.
template <class T>
void softmax_row(T* row, std::size_t n, const std::uint8_t* keep = nullptr) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    if (!keep || keep[i]) mx = std::max(mx, row[i]);
  if (mx == -std::numeric_limits<T>::infinity()) {
    std::fill(row, row + n, T{});
    return;
  }
  T sum{};
  for (std::size_t i = 0; i < n; ++i) {
    row[i] = (!keep || keep[i]) ? std::exp(row[i] - mx) : T{};
    sum += row[i];
  }
  for (std::size_t i = 0; i < n; ++i) row[i] /= sum;
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (std::size_t r = 0; r < y.rows(); ++r) softmax_row(y.ptr() + r * y.cols(), y.cols());
  return y;
}

template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_rank2("embedding", table.shape());
  const std::size_t d = table.shape()[1];
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.shape()[0])
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(table.shape()[0]) + " rows");
    std::copy_n(table.ptr() + ids[i] * d, d, out.ptr() + i * d);
  }
  return out;
}

}  // namespace tagbert::ops
