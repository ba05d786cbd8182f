#pragma once

// Tape-based reverse-mode differentiation over coarse tensor operations.
//
// A Tape records every operation of one forward pass. Parameters enter the
// tape by reference and accumulate their gradients directly into
// Parameter::grad, so a parameter that is not on any path to the loss keeps
// whatever its grad held before (zero after Parameter::zero_grad()).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tagbert/ops.hpp"
#include "tagbert/rng.hpp"
#include "tagbert/tensor.hpp"

namespace tagbert {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = true;

  void zero_grad() {
    if (grad.shape() != value.shape())
      grad = Tensor<T>(value.shape());
    else
      grad.fill(T{});
  }
};

struct Var {
  static constexpr std::size_t none = static_cast<std::size_t>(-1);
  std::size_t id = none;
  bool valid() const noexcept { return id != none; }
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var)>;

  Var constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var param(Parameter<T>& p) {
    if (p.grad.shape() != p.value.shape()) p.zero_grad();
    Node n;
    n.ref = &p.value;
    n.sink = &p.grad;
    n.requires_grad = true;
    return push(std::move(n));
  }

  /// Read-only parameter: participates in the forward pass, receives no gradient.
  Var param(const Parameter<T>& p) {
    Node n;
    n.ref = &p.value;
    return push(std::move(n));
  }

  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (Var v : inputs)
      if (v.valid() && requires_grad(v)) needs = true;
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(fn);
    return push(std::move(n));
  }

  Var record(Tensor<T> value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (Var v : inputs)
      if (v.valid() && requires_grad(v)) needs = true;
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref ? *n.ref : n.value;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient slot of v, allocated as zeros on first use.
  Tensor<T>& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.sink) return *n.sink;
    if (n.grad.shape() != value(v).shape()) n.grad = Tensor<T>(value(v).shape());
    return n.grad;
  }

  void backward(Var loss) {
    if (value(loss).size() != 1)
      throw ShapeError("backward: loss must be a scalar, got shape " +
                       shape_string(value(loss).shape()));
    if (!requires_grad(loss)) return;
    grad(loss)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, Var{i});
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T>* sink = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

namespace ad {

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  return t.record(ops::add(t.value(a), t.value(b)), {a, b}, [a, b](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.grad(self);
    for (Var in : {a, b}) {
      if (!tp.requires_grad(in)) continue;
      Tensor<T>& gi = tp.grad(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <class T>
Var scale(Tape<T>& t, Var x, T s) {
  Tensor<T> y = t.value(x);
  for (auto& v : y.data()) v *= s;
  return t.record(std::move(y), {x}, [x, s](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
  });
}

template <class T>
Var sum(Tape<T>& t, Var x) {
  T s{};
  for (T v : t.value(x).data()) s += v;
  return t.record(Tensor<T>::scalar(s), {x}, [x](Tape<T>& tp, Var self) {
    const T g = tp.grad(self)[0];
    for (auto& v : tp.grad(x).data()) v += g;
  });
}

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
  return t.record(ops::matmul(t.value(a), t.value(b)), {a, b}, [a, b](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& av = tp.value(a);
    const Tensor<T>& bv = tp.value(b);
    const std::size_t R = av.shape()[0], K = av.shape()[1], J = bv.shape()[1];
    if (tp.requires_grad(a)) kernel::gemm_abt(g.ptr(), bv.ptr(), tp.grad(a).ptr(), R, J, K, true);
    if (tp.requires_grad(b)) kernel::gemm_atb(av.ptr(), g.ptr(), tp.grad(b).ptr(), R, K, J, true);
  });
}

/// y = x W^T + b, W stored (out, in); pass an invalid Var for no bias.
template <class T>
Var linear(Tape<T>& t, Var x, Var w, Var b = Var{}) {
  const Tensor<T>* bias = b.valid() ? &t.value(b) : nullptr;
  return t.record(ops::linear(t.value(x), t.value(w), bias), {x, w, b},
                  [x, w, b](Tape<T>& tp, Var self) {
                    const Tensor<T>& g = tp.grad(self);
                    const Tensor<T>& xv = tp.value(x);
                    const Tensor<T>& wv = tp.value(w);
                    const std::size_t R = xv.rows(), I = wv.shape()[1], O = wv.shape()[0];
                    if (tp.requires_grad(x))
                      kernel::gemm_ab(g.ptr(), wv.ptr(), tp.grad(x).ptr(), R, O, I, true);
                    if (tp.requires_grad(w))
                      kernel::gemm_atb(g.ptr(), xv.ptr(), tp.grad(w).ptr(), R, O, I, true);
                    if (b.valid() && tp.requires_grad(b)) {
                      Tensor<T>& gb = tp.grad(b);
                      for (std::size_t r = 0; r < R; ++r)
                        for (std::size_t o = 0; o < O; ++o) gb[o] += g(r, o);
                    }
                  });
}

template <class T>
Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, double eps) {
  auto stats = std::make_shared<ops::LayerNormStats>();
  Tensor<T> y = ops::layer_norm(t.value(x), t.value(gain), t.value(bias), eps, stats.get());
  return t.record(std::move(y), {x, gain, bias}, [x, gain, bias, stats](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& xv = tp.value(x);
    const Tensor<T>& gv = tp.value(gain);
    const std::size_t n = xv.cols(), rows = xv.rows();
    const bool need_x = tp.requires_grad(x), need_g = tp.requires_grad(gain),
               need_b = tp.requires_grad(bias);
    std::vector<T> xhat(n), dxhat(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const T mean = static_cast<T>(stats->mean[r]), rstd = static_cast<T>(stats->rstd[r]);
      const T* xr = xv.ptr() + r * n;
      const T* gr = g.ptr() + r * n;
      T mean_d{}, mean_dx{};
      for (std::size_t i = 0; i < n; ++i) {
        xhat[i] = (xr[i] - mean) * rstd;
        dxhat[i] = gr[i] * gv[i];
        mean_d += dxhat[i];
        mean_dx += dxhat[i] * xhat[i];
      }
      mean_d /= static_cast<T>(n);
      mean_dx /= static_cast<T>(n);
      if (need_x) {
        T* dx = tp.grad(x).ptr() + r * n;
        for (std::size_t i = 0; i < n; ++i) dx[i] += rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
      }
      if (need_g) {
        Tensor<T>& dg = tp.grad(gain);
        for (std::size_t i = 0; i < n; ++i) dg[i] += gr[i] * xhat[i];
      }
      if (need_b) {
        Tensor<T>& db = tp.grad(bias);
        for (std::size_t i = 0; i < n; ++i) db[i] += gr[i];
      }
    }
  });
}

template <class T>
Var gelu(Tape<T>& t, Var x) {
  return t.record(ops::gelu(t.value(x)), {x}, [x](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& xv = tp.value(x);
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * ops::gelu_grad(xv[i]);
  });
}

template <class T>
Var softmax(Tape<T>& t, Var x) {
  return t.record(ops::softmax(t.value(x)), {x}, [x](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& y = tp.value(self);
    Tensor<T>& gx = tp.grad(x);
    const std::size_t n = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      T dotp{};
      for (std::size_t i = 0; i < n; ++i) dotp += g(r, i) * y(r, i);
      for (std::size_t i = 0; i < n; ++i) gx(r, i) += y(r, i) * (g(r, i) - dotp);
    }
  });
}

template <class T>
Var embedding(Tape<T>& t, Var table, std::span<const std::int32_t> ids) {
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return t.record(ops::embedding_lookup(t.value(table), ids), {table},
                  [table, saved = std::move(saved)](Tape<T>& tp, Var self) {
                    const Tensor<T>& g = tp.grad(self);
                    Tensor<T>& gt = tp.grad(table);
                    const std::size_t d = g.cols();
                    for (std::size_t i = 0; i < saved.size(); ++i)
                      kernel::axpy(T{1}, g.ptr() + i * d, gt.ptr() + saved[i] * d, d);
                  });
}

/// Selects rows of a matrix; gradients scatter back to the selected rows.
template <class T>
Var gather_rows(Tape<T>& t, Var x, std::span<const std::size_t> rows) {
  const Tensor<T>& xv = t.value(x);
  const std::size_t d = xv.cols();
  Tensor<T> y({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) throw std::out_of_range("gather_rows: row index out of range");
    std::copy_n(xv.ptr() + rows[i] * d, d, y.ptr() + i * d);
  }
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return t.record(std::move(y), {x}, [x, saved = std::move(saved)](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad(x);
    const std::size_t d = g.cols();
    for (std::size_t i = 0; i < saved.size(); ++i)
      kernel::axpy(T{1}, g.ptr() + i * d, gx.ptr() + saved[i] * d, d);
  });
}

/// Inverted dropout. Identity when p == 0 or no generator is supplied.
template <class T>
Var dropout(Tape<T>& t, Var x, double p, Rng* rng) {
  if (p <= 0.0 || rng == nullptr) return x;
  const Tensor<T>& xv = t.value(x);
  auto mask = std::make_shared<std::vector<T>>(xv.size());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = rng->bernoulli(p) ? T{} : keep_scale;
    y[i] = xv[i] * (*mask)[i];
  }
  return t.record(std::move(y), {x}, [x, mask](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

struct AttentionShape {
  std::size_t batch = 0, length = 0, heads = 1;
};

/// Multi-head scaled dot-product self-attention over rows laid out as
/// (batch * length, hidden). Keys with key_mask == 0 receive exactly zero
/// weight. Returns the concatenated per-head context vectors.
template <class T>
Var attention(Tape<T>& t, Var q, Var k, Var v, AttentionShape shape,
              std::span<const std::uint8_t> key_mask, double dropout_p = 0.0, Rng* rng = nullptr,
              Tensor<T>* probs_out = nullptr) {
  const Tensor<T>& qv = t.value(q);
  const std::size_t B = shape.batch, N = shape.length, H = shape.heads, d = qv.cols();
  if (qv.rows() != B * N || d % H != 0 || key_mask.size() != B * N)
    throw ShapeError("attention: rows " + std::to_string(qv.rows()) + " do not match batch " +
                     std::to_string(B) + " x length " + std::to_string(N));
  if (t.value(k).shape() != qv.shape() || t.value(v).shape() != qv.shape())
    throw shape_mismatch("attention", qv.shape(), t.value(k).shape());
  const std::size_t dh = d / H;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  const bool use_dropout = dropout_p > 0.0 && rng != nullptr;
  const T keep_scale = static_cast<T>(use_dropout ? 1.0 / (1.0 - dropout_p) : 1.0);

  auto probs = std::make_shared<std::vector<T>>(B * H * N * N);
  auto drop = std::make_shared<std::vector<T>>(use_dropout ? probs->size() : 0);
  std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
  const Tensor<T>& kv = t.value(k);
  const Tensor<T>& vv = t.value(v);
  Tensor<T> out({B * N, d});

  for (std::size_t b = 0; b < B; ++b) {
    const std::uint8_t* keep = mask.data() + b * N;
    for (std::size_t h = 0; h < H; ++h) {
      T* P = probs->data() + (b * H + h) * N * N;
      for (std::size_t i = 0; i < N; ++i) {
        const T* qi = qv.ptr() + (b * N + i) * d + h * dh;
        T* row = P + i * N;
        for (std::size_t j = 0; j < N; ++j)
          row[j] = keep[j] ? kernel::dot(qi, kv.ptr() + (b * N + j) * d + h * dh, dh) * scale : T{};
        ops::softmax_row(row, N, keep);
        T* oi = out.ptr() + (b * N + i) * d + h * dh;
        for (std::size_t j = 0; j < N; ++j) {
          T w = row[j];
          if (use_dropout) {
            T& m = (*drop)[(b * H + h) * N * N + i * N + j];
            m = rng->bernoulli(dropout_p) ? T{} : keep_scale;
            w *= m;
          }
          if (w != T{}) kernel::axpy(w, vv.ptr() + (b * N + j) * d + h * dh, oi, dh);
        }
      }
    }
  }
  if (probs_out) *probs_out = Tensor<T>({B, H, N, N}, *probs);

  return t.record(std::move(out), {q, k, v},
                  [q, k, v, B, N, H, d, dh, scale, probs, drop](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& qv = tp.value(q);
    const Tensor<T>& kv = tp.value(k);
    const Tensor<T>& vv = tp.value(v);
    T* gq = tp.requires_grad(q) ? tp.grad(q).ptr() : nullptr;
    T* gk = tp.requires_grad(k) ? tp.grad(k).ptr() : nullptr;
    T* gv = tp.requires_grad(v) ? tp.grad(v).ptr() : nullptr;
    std::vector<T> dP(N);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        const T* P = probs->data() + (b * H + h) * N * N;
        const T* M = drop->empty() ? nullptr : drop->data() + (b * H + h) * N * N;
        for (std::size_t i = 0; i < N; ++i) {
          const T* gi = g.ptr() + (b * N + i) * d + h * dh;
          const T* row = P + i * N;
          T weighted{};
          for (std::size_t j = 0; j < N; ++j) {
            const T m = M ? M[i * N + j] : T{1};
            if (row[j] == T{}) {
              dP[j] = T{};
              continue;
            }
            const T* vj = vv.ptr() + (b * N + j) * d + h * dh;
            dP[j] = kernel::dot(gi, vj, dh) * m;
            if (gv) kernel::axpy(row[j] * m, gi, gv + (b * N + j) * d + h * dh, dh);
            weighted += dP[j] * row[j];
          }
          const T* qi = qv.ptr() + (b * N + i) * d + h * dh;
          for (std::size_t j = 0; j < N; ++j) {
            if (row[j] == T{}) continue;
            const T ds = row[j] * (dP[j] - weighted) * scale;
            if (gq) kernel::axpy(ds, kv.ptr() + (b * N + j) * d + h * dh, gq + (b * N + i) * d + h * dh, dh);
            if (gk) kernel::axpy(ds, qi, gk + (b * N + j) * d + h * dh, dh);
          }
        }
      }
    }
  });
}

/// Softmax-weighted mixture of equally shaped tensors; the mixture logits are
/// a vector with one entry per input.
template <class T>
Var weighted_sum(Tape<T>& t, std::span<const Var> xs, Var logits) {
  const Tensor<T>& lv = t.value(logits);
  if (lv.size() != xs.size() || xs.empty())
    throw ShapeError("weighted_sum: " + std::to_string(xs.size()) + " inputs but " +
                     std::to_string(lv.size()) + " mixture logits");
  Tensor<T> w = ops::softmax(lv.reshaped({1, lv.size()}));
  Tensor<T> y(t.value(xs[0]).shape());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Tensor<T>& xi = t.value(xs[i]);
    if (xi.shape() != y.shape()) throw shape_mismatch("weighted_sum", y.shape(), xi.shape());
    kernel::axpy(w[i], xi.ptr(), y.ptr(), y.size());
  }
  std::vector<Var> inputs(xs.begin(), xs.end());
  inputs.push_back(logits);
  std::vector<Var> saved(xs.begin(), xs.end());
  return t.record(std::move(y), std::span<const Var>(inputs),
                  [saved = std::move(saved), logits, w](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.grad(self);
    const std::size_t L = saved.size();
    std::vector<T> dw(L);
    for (std::size_t i = 0; i < L; ++i) {
      const Tensor<T>& xi = tp.value(saved[i]);
      dw[i] = kernel::dot(g.ptr(), xi.ptr(), g.size());
      if (tp.requires_grad(saved[i])) kernel::axpy(w[i], g.ptr(), tp.grad(saved[i]).ptr(), g.size());
    }
    if (tp.requires_grad(logits)) {
      T mean{};
      for (std::size_t i = 0; i < L; ++i) mean += w[i] * dw[i];
      Tensor<T>& gl = tp.grad(logits);
      for (std::size_t i = 0; i < L; ++i) gl[i] += w[i] * (dw[i] - mean);
    }
  });
}

enum class Reduction { mean, sum };

struct CrossEntropy {
  Var loss;
  std::size_t count = 0;  // contributing (non-ignored) rows
  bool empty() const noexcept { return count == 0; }
};

/// Cross-entropy of row-wise softmax(logits) against integer labels. Rows
/// labelled ignore_index do not contribute; with no contributing rows the
/// loss is the constant 0 and `empty()` is true.
template <class T>
CrossEntropy cross_entropy(Tape<T>& t, Var logits, std::span<const std::int32_t> labels,
                           std::int32_t ignore_index, Reduction reduction = Reduction::mean) {
  const Tensor<T>& lv = t.value(logits);
  const std::size_t K = lv.cols(), N = lv.rows();
  if (labels.size() != N)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(N) + " rows");
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < N; ++r) {
    if (labels[r] == ignore_index) continue;
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= K)
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) +
                              " outside [0, " + std::to_string(K) + ")");
    rows.push_back(r);
  }
  if (rows.empty()) return {t.constant(Tensor<T>::scalar(T{})), 0};

  auto probs = std::make_shared<std::vector<T>>(rows.size() * K);
  using W = ops::wide_t<T>;
  W total = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const T* x = lv.ptr() + rows[i] * K;
    T* p = probs->data() + i * K;
    std::copy_n(x, K, p);
    ops::softmax_row(p, K);
    T mx = *std::max_element(x, x + K);
    W se = 0;
    for (std::size_t c = 0; c < K; ++c) se += std::exp(static_cast<W>(x[c] - mx));
    total += std::log(se) + mx - x[labels[rows[i]]];
  }
  const T denom = reduction == Reduction::mean ? static_cast<T>(rows.size()) : T{1};
  Tensor<T> value = Tensor<T>::scalar(static_cast<T>(total / static_cast<W>(denom)));
  std::vector<std::int32_t> targets;
  for (std::size_t r : rows) targets.push_back(labels[r]);
  Var loss = t.record(std::move(value), {logits},
                      [logits, rows, targets = std::move(targets), probs, K, denom](Tape<T>& tp, Var self) {
    const T g = tp.grad(self)[0] / denom;
    Tensor<T>& gl = tp.grad(logits);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const T* p = probs->data() + i * K;
      T* gr = gl.ptr() + rows[i] * K;
      for (std::size_t c = 0; c < K; ++c) gr[c] += g * p[c];
      gr[targets[i]] -= g;
    }
  });
  return {loss, rows.size()};
}

}  // namespace ad
}  // namespace tagbert
