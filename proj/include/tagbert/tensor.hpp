#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tagbert {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline ShapeError shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  return ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                    shape_string(b));
}

/// Dense row-major array. Anything of rank >= 2 is also viewed as a matrix of
/// rows() x cols() where cols() is the last dimension.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : size() / cols(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw shape_mismatch("reshape", shape_, shape);
    return Tensor(std::move(shape), data_);
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

struct NumericsOptions {
  unsigned threads = 1;
};

inline NumericsOptions& numerics_options() {
  static NumericsOptions options;
  return options;
}

/// Splits [0, n) into contiguous chunks, one per worker. Work items must be
/// independent; each item is computed by exactly one worker in the same order
/// as the sequential loop, so results do not depend on the thread count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const unsigned threads = std::max(1u, numerics_options().threads);
  if (threads == 1 || n < 2 * threads) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> workers;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (unsigned w = 0; w < threads; ++w) {
    const std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    workers.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
}

namespace kernel {

template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T s0{}, s1{}, s2{}, s3{};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

template <class T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// c(R,O) (+)= a(R,K) * b(O,K)^T
template <class T>
void gemm_abt(const T* a, const T* b, T* c, std::size_t R, std::size_t K, std::size_t O,
              bool accumulate) {
  parallel_for(R, [&](std::size_t r) {
    const T* ar = a + r * K;
    T* cr = c + r * O;
    for (std::size_t o = 0; o < O; ++o) {
      const T v = dot(ar, b + o * K, K);
      cr[o] = accumulate ? cr[o] + v : v;
    }
  });
}

// c(R,J) (+)= a(R,K) * b(K,J)
template <class T>
void gemm_ab(const T* a, const T* b, T* c, std::size_t R, std::size_t K, std::size_t J,
             bool accumulate) {
  parallel_for(R, [&](std::size_t r) {
    T* cr = c + r * J;
    if (!accumulate) std::fill(cr, cr + J, T{});
    const T* ar = a + r * K;
    for (std::size_t k = 0; k < K; ++k) axpy(ar[k], b + k * J, cr, J);
  });
}

// c(I,J) (+)= a(R,I)^T * b(R,J)
template <class T>
void gemm_atb(const T* a, const T* b, T* c, std::size_t R, std::size_t I, std::size_t J,
              bool accumulate) {
  parallel_for(I, [&](std::size_t i) {
    T* ci = c + i * J;
    if (!accumulate) std::fill(ci, ci + J, T{});
    for (std::size_t r = 0; r < R; ++r) axpy(a[r * I + i], b + r * J, ci, J);
  });
}

}  // namespace kernel
}  // namespace tagbert
