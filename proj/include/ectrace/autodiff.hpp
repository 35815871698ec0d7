// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a tape for reverse-mode differentiation.
//
// A Graph records one backward closure per differentiable op, in creation
// order; Graph::backward() seeds the loss gradient and walks the tape in
// reverse exactly once. Backward closures accumulate (+=) into input
// gradients, so a tensor used twice receives the sum.
//
// Ops treat a tensor as a matrix of rows() x cols(), where cols() is the
// last dimension. GEMMs go through Eigen maps over the raw buffers.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ectrace/rng.hpp"

namespace ectrace::ad {

class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline constexpr std::size_t kBufferAlign = 64;

/// Allocator whose value-initialization is a no-op, so op outputs that are
/// fully overwritten skip the zero fill. Buffers are 64-byte aligned: Eigen
/// picks its reduction order from the pointer alignment, and a fixed
/// alignment keeps results bit-identical across runs.
template <class T>
struct UninitAllocator : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = UninitAllocator<U>;
  };
  UninitAllocator() = default;
  template <class U>
  UninitAllocator(const UninitAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kBufferAlign)));
  }
  void deallocate(T* p, std::size_t n) noexcept { ::operator delete(p, n * sizeof(T), std::align_val_t(kBufferAlign)); }
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <class T>
using Buffer = std::vector<T, UninitAllocator<T>>;

struct Uninitialized {};

template <class T>
struct TensorData {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // allocated on first use
  bool requires_grad = false;
};

/// Shared handle to tensor storage. Copies alias the same buffers.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false) : d_(std::make_shared<TensorData<T>>()) {
    d_->value.assign(numel_of(shape), T(0));
    d_->shape = std::move(shape);
    d_->requires_grad = requires_grad;
  }

  /// Storage left uninitialized; the caller overwrites every element.
  Tensor(Shape shape, Uninitialized, bool requires_grad = false) : d_(std::make_shared<TensorData<T>>()) {
    d_->value.resize(numel_of(shape));
    d_->shape = std::move(shape);
    d_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, const std::vector<T>& values, bool requires_grad = false) : d_(std::make_shared<TensorData<T>>()) {
    if (values.size() != numel_of(shape)) {
      throw ShapeMismatch("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    }
    d_->shape = std::move(shape);
    d_->value.assign(values.begin(), values.end());
    d_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const noexcept { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape.at(i); }
  std::size_t numel() const { return d_->value.size(); }
  std::size_t cols() const { return d_->shape.empty() ? 1 : d_->shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  T* data() { return d_->value.data(); }
  const T* data() const { return d_->value.data(); }
  std::span<T> values() { return d_->value; }
  std::span<const T> values() const { return d_->value; }

  bool has_grad() const { return !d_->grad.empty(); }
  /// Gradient buffer, zero-allocated on first access.
  std::span<T> grad() {
    if (d_->grad.size() != d_->value.size()) d_->grad.assign(d_->value.size(), T(0));
    return d_->grad;
  }
  std::span<const T> grad() const { return d_->grad; }
  T* grad_data() { return grad().data(); }
  void zero_grad() { std::fill(d_->grad.begin(), d_->grad.end(), T(0)); }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool r) { d_->requires_grad = r; }

  T item() const {
    if (numel() != 1) throw ShapeMismatch("item() on tensor of shape " + shape_str(shape()));
    return d_->value[0];
  }

  T& operator[](std::size_t i) { return d_->value[i]; }
  T operator[](std::size_t i) const { return d_->value[i]; }

  bool same(const Tensor& o) const noexcept { return d_ == o.d_; }

  /// Deep copy without gradient.
  Tensor clone() const {
    Tensor t(shape(), Uninitialized{}, requires_grad());
    std::copy(d_->value.begin(), d_->value.end(), t.d_->value.begin());
    return t;
  }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

/// Tape of backward closures for one forward pass.
template <class T>
class Graph {
 public:
  /// recording=false builds no tape (inference). training enables dropout.
  explicit Graph(bool recording = true, bool training = false, std::uint64_t seed = 0)
      : recording_(recording), training_(training), rng_(seed) {}

  bool recording() const noexcept { return recording_; }
  bool training() const noexcept { return training_; }
  Rng& rng() noexcept { return rng_; }
  std::size_t size() const noexcept { return tape_.size(); }

  template <class... Ts>
  bool needs_grad(const Ts&... ts) const {
    return recording_ && (... || (ts.defined() && ts.requires_grad()));
  }

  void record(std::function<void()> backward) { tape_.push_back(std::move(backward)); }

  void backward(Tensor<T> loss) {
    if (done_) throw std::logic_error("backward() already ran on this graph");
    if (loss.numel() != 1) throw ShapeMismatch("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    done_ = true;
    if (!loss.requires_grad()) return;
    loss.grad()[0] += T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    tape_.clear();
  }

 private:
  std::vector<std::function<void()>> tape_;
  bool recording_;
  bool training_;
  bool done_ = false;
  Rng rng_;
};

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using VecMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;

template <class T>
MatMap<T> mat(T* p, std::size_t r, std::size_t c) {
  return MatMap<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <class T>
Tensor<T> add(Graph<T>& g, Tensor<T> a, Tensor<T> b) {
  if (a.shape() != b.shape()) throw ShapeMismatch("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape(), Uninitialized{}, g.needs_grad(a, b));
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  if (out.requires_grad()) {
    g.record([a, b, out]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Graph<T>& g, Tensor<T> a, Tensor<T> b) {
  if (a.numel() != b.numel()) throw ShapeMismatch("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape(), Uninitialized{}, g.needs_grad(a, b));
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  if (out.requires_grad()) {
    g.record([a, b, out]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Graph<T>& g, Tensor<T> x, T c) {
  Tensor<T> out(x.shape(), Uninitialized{}, g.needs_grad(x));
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * c;
  if (out.requires_grad()) {
    g.record([x, out, c]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * c;
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(Graph<T>& g, Tensor<T> x) {
  Tensor<T> out({1}, g.needs_grad(x));
  T s = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
  out[0] = s;
  if (out.requires_grad()) {
    g.record([x, out]() mutable {
      const T go = out.grad()[0];
      auto gx = x.grad();
      for (auto& v : gx) v += go;
    });
  }
  return out;
}

template <class T>
Tensor<T> sum_squares(Graph<T>& g, Tensor<T> x) {
  Tensor<T> out({1}, g.needs_grad(x));
  T s = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x[i] * x[i];
  out[0] = s;
  if (out.requires_grad()) {
    g.record([x, out]() mutable {
      const T go = out.grad()[0];
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += T(2) * x[i] * go;
    });
  }
  return out;
}

template <class T>
Tensor<T> relu(Graph<T>& g, Tensor<T> x) {
  Tensor<T> out(x.shape(), Uninitialized{}, g.needs_grad(x));
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  if (out.requires_grad()) {
    g.record([x, out]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (x[i] > T(0)) gx[i] += go[i];
      }
    });
  }
  return out;
}

/// Exact GELU: x * Phi(x).
template <class T>
Tensor<T> gelu(Graph<T>& g, Tensor<T> x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  Tensor<T> out(x.shape(), Uninitialized{}, g.needs_grad(x));
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * T(0.5) * (T(1) + std::erf(x[i] * kInvSqrt2));
  if (out.requires_grad()) {
    g.record([x, out]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(x[i] * kInvSqrt2));
        const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x[i] * x[i]);
        gx[i] += go[i] * (cdf + x[i] * pdf);
      }
    });
  }
  return out;
}

/// Inverted dropout; identity outside training mode or at rate 0.
template <class T>
Tensor<T> dropout(Graph<T>& g, Tensor<T> x, double rate) {
  if (!g.training() || rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  const T keep_scale = T(1.0 / (1.0 - rate));
  Buffer<T> mask(x.numel());
  for (auto& m : mask) m = g.rng().uniform() < rate ? T(0) : keep_scale;
  Tensor<T> out(x.shape(), Uninitialized{}, g.needs_grad(x));
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * mask[i];
  if (out.requires_grad()) {
    g.record([x, out, mask = std::move(mask)]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * mask[i];
    });
  }
  return out;
}

/// Rows of x at the given indices.
template <class T>
Tensor<T> gather_rows(Graph<T>& g, Tensor<T> x, std::vector<std::size_t> idx) {
  const std::size_t c = x.cols();
  Tensor<T> out({idx.size(), c}, Uninitialized{}, g.needs_grad(x));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= x.rows()) throw ShapeMismatch("gather_rows: row index out of range");
    std::copy_n(x.data() + idx[r] * c, c, out.data() + r * c);
  }
  if (out.requires_grad()) {
    g.record([x, out, idx = std::move(idx), c]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t j = 0; j < c; ++j) gx[idx[r] * c + j] += go[r * c + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a [m, k] x b [k, n] -> [m, n]
template <class T>
Tensor<T> matmul(Graph<T>& g, Tensor<T> a, Tensor<T> b) {
  if (b.rank() != 2 || a.cols() != b.dim(0)) {
    throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.dim(1);
  Tensor<T> out({m, n}, Uninitialized{}, g.needs_grad(a, b));
  mat(out.data(), m, n).noalias() = mat(a.data(), m, k) * mat(b.data(), k, n);
  if (out.requires_grad()) {
    g.record([a, b, out, m, k, n]() mutable {
      auto go = mat(out.grad_data(), m, n);
      if (a.requires_grad()) mat(a.grad_data(), m, k).noalias() += go * mat(b.data(), k, n).transpose();
      if (b.requires_grad()) mat(b.grad_data(), k, n).noalias() += mat(a.data(), m, k).transpose() * go;
    });
  }
  return out;
}

/// x [m, k] W [k, n] + bias [n]; bias may be undefined.
template <class T>
Tensor<T> linear(Graph<T>& g, Tensor<T> x, Tensor<T> w, Tensor<T> bias = {}) {
  if (w.rank() != 2 || x.cols() != w.dim(0)) {
    throw ShapeMismatch("linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const std::size_t m = x.rows(), k = x.cols(), n = w.dim(1);
  if (bias.defined() && bias.numel() != n) throw ShapeMismatch("linear: bias size " + std::to_string(bias.numel()));
  Shape shape = x.shape();
  shape.back() = n;
  Tensor<T> out(shape, Uninitialized{}, g.needs_grad(x, w, bias));
  auto o = mat(out.data(), m, n);
  o.noalias() = mat(x.data(), m, k) * mat(w.data(), k, n);
  if (bias.defined()) o.rowwise() += VecMap<T>(bias.data(), static_cast<Eigen::Index>(n));
  if (out.requires_grad()) {
    g.record([x, w, bias, out, m, k, n]() mutable {
      auto go = mat(out.grad_data(), m, n);
      if (x.requires_grad()) mat(x.grad_data(), m, k).noalias() += go * mat(w.data(), k, n).transpose();
      if (w.requires_grad()) mat(w.grad_data(), k, n).noalias() += mat(x.data(), m, k).transpose() * go;
      if (bias.defined() && bias.requires_grad()) {
        VecMap<T>(bias.grad_data(), static_cast<Eigen::Index>(n)) += go.colwise().sum();
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and probabilities

/// Softmax over the last axis with max subtraction.
template <class T>
Tensor<T> softmax(Graph<T>& g, Tensor<T> x) {
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> out(x.shape(), Uninitialized{}, g.needs_grad(x));
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = x.data() + i * c;
    T* yi = out.data() + i * c;
    const T mx = *std::max_element(xi, xi + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < c; ++j) yi[j] /= s;
  }
  if (out.requires_grad()) {
    g.record([x, out, r, c]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < r; ++i) {
        const T* y = out.data() + i * c;
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += go[i * c + j] * y[j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[j] * (go[i * c + j] - dot);
      }
    });
  }
  return out;
}

/// Layer normalization over the last axis: gain * (x - mean) / sqrt(var + eps) + bias.
template <class T>
Tensor<T> layer_norm(Graph<T>& g, Tensor<T> x, Tensor<T> gain, Tensor<T> bias, T eps = T(1e-5)) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c) throw ShapeMismatch("layer_norm: affine size mismatch");
  Tensor<T> out(x.shape(), Uninitialized{}, g.needs_grad(x, gain, bias));
  Buffer<T> xhat(x.numel());
  Buffer<T> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = x.data() + i * c;
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xi[j];
    mean /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= T(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xi[j] - mean) * is;
      out[i * c + j] = xhat[i * c + j] * gain[j] + bias[j];
    }
  }
  if (out.requires_grad()) {
    g.record([x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c]() mutable {
      auto go = out.grad();
      if (gain.requires_grad()) {
        auto gg = gain.grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gg[j] += go[i * c + j] * xhat[i * c + j];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gb[j] += go[i * c + j];
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < r; ++i) {
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < c; ++j) {
            const T dy = go[i * c + j] * gain[j];
            m1 += dy;
            m2 += dy * xhat[i * c + j];
          }
          m1 /= T(c);
          m2 /= T(c);
          for (std::size_t j = 0; j < c; ++j) {
            const T dy = go[i * c + j] * gain[j];
            gx[i * c + j] += inv_std[i] * (dy - m1 - xhat[i * c + j] * m2);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embeddings and losses

/// Rows of table [v, d] selected by ids -> [ids.size(), d].
template <class T>
Tensor<T> embedding_lookup(Graph<T>& g, const std::vector<int>& ids, Tensor<T> table) {
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<std::size_t> idx(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw ShapeMismatch("embedding_lookup: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v));
    }
    idx[i] = static_cast<std::size_t>(ids[i]);
  }
  Tensor<T> out({ids.size(), d}, Uninitialized{}, g.needs_grad(table));
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(table.data() + idx[i] * d, d, out.data() + i * d);
  if (out.requires_grad()) {
    g.record([table, out, idx = std::move(idx), d]() mutable {
      auto go = out.grad();
      auto gt = table.grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[idx[i] * d + j] += go[i * d + j];
    });
  }
  return out;
}

/// Mean softmax cross-entropy over rows whose label is >= 0.
template <class T>
Tensor<T> cross_entropy(Graph<T>& g, Tensor<T> logits, const std::vector<int>& labels) {
  const std::size_t r = logits.rows(), c = logits.cols();
  if (labels.size() != r) throw ShapeMismatch("cross_entropy: label count mismatch");
  Buffer<T> probs(logits.numel());
  T total = 0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < r; ++i) {
    const T* z = logits.data() + i * c;
    const T mx = *std::max_element(z, z + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += (probs[i * c + j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    if (labels[i] < 0) continue;
    if (static_cast<std::size_t>(labels[i]) >= c) throw ShapeMismatch("cross_entropy: label out of range");
    total += -(z[labels[i]] - mx - std::log(s));
    ++counted;
  }
  Tensor<T> out({1}, g.needs_grad(logits));
  out[0] = counted ? total / T(counted) : T(0);
  if (out.requires_grad() && counted) {
    g.record([logits, out, labels, probs = std::move(probs), r, c, counted]() mutable {
      const T go = out.grad()[0] / T(counted);
      auto gz = logits.grad();
      for (std::size_t i = 0; i < r; ++i) {
        if (labels[i] < 0) continue;
        for (std::size_t j = 0; j < c; ++j) {
          gz[i * c + j] += go * (probs[i * c + j] - (static_cast<int>(j) == labels[i] ? T(1) : T(0)));
        }
      }
    });
  }
  return out;
}

/// Mean binary log-loss of sigmoid(logits[:, 0]) against 0/1 targets.
template <class T>
Tensor<T> binary_cross_entropy_with_logits(Graph<T>& g, Tensor<T> logits, const std::vector<int>& targets) {
  const std::size_t r = logits.rows();
  if (logits.cols() != 1 || targets.size() != r) throw ShapeMismatch("binary_cross_entropy: expects [n, 1] logits");
  T total = 0;
  for (std::size_t i = 0; i < r; ++i) {
    const T z = logits[i];
    // log(1 + exp(-|z|)) + max(z, 0) - z * y
    total += std::log1p(std::exp(-std::abs(z))) + std::max(z, T(0)) - z * T(targets[i]);
  }
  Tensor<T> out({1}, g.needs_grad(logits));
  out[0] = r ? total / T(r) : T(0);
  if (out.requires_grad() && r) {
    g.record([logits, out, targets, r]() mutable {
      const T go = out.grad()[0] / T(r);
      auto gz = logits.grad();
      for (std::size_t i = 0; i < r; ++i) {
        const T s = T(1) / (T(1) + std::exp(-logits[i]));
        gz[i] += go * (s - T(targets[i]));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

/// Scaled dot-product attention for `heads` heads packed along the feature
/// axis. q is [batch * lq, D]; k and v are [batch * lk, D]; head h uses
/// columns [h * D / heads, (h + 1) * D / heads). key_mask (size batch * lk,
/// nonzero = masked) removes keys before the softmax. Returns the packed
/// per-head outputs [batch * lq, D]. If probs_out is given it receives the
/// attention weights laid out [batch][heads][lq][lk].
template <class T>
Tensor<T> attention(Graph<T>& g, Tensor<T> q, Tensor<T> k, Tensor<T> v, std::size_t heads, std::size_t batch,
                    const std::vector<std::uint8_t>& key_mask = {}, std::vector<T>* probs_out = nullptr) {
  const std::size_t D = q.cols();
  if (heads == 0 || D % heads != 0) throw ShapeMismatch("attention: width not divisible by heads");
  if (k.cols() != D || v.cols() != D || k.rows() != v.rows()) throw ShapeMismatch("attention: q/k/v widths differ");
  if (batch == 0 || q.rows() % batch != 0 || k.rows() % batch != 0) throw ShapeMismatch("attention: bad batch");
  const std::size_t lq = q.rows() / batch, lk = k.rows() / batch, dk = D / heads;
  if (!key_mask.empty() && key_mask.size() != batch * lk) throw ShapeMismatch("attention: mask size");
  const T inv_sqrt = T(1) / std::sqrt(T(dk));
  const auto Lq = static_cast<Eigen::Index>(lq), Lk = static_cast<Eigen::Index>(lk), Dk = static_cast<Eigen::Index>(dk);

  Buffer<T> probs(batch * heads * lq * lk);
  Tensor<T> out({batch * lq, D}, Uninitialized{}, g.needs_grad(q, k, v));
  auto Q = mat(q.data(), q.rows(), D);
  auto K = mat(k.data(), k.rows(), D);
  auto V = mat(v.data(), v.rows(), D);
  auto O = mat(out.data(), out.rows(), D);
  using Row = Eigen::Array<T, 1, Eigen::Dynamic>;
  Row keep = Row::Ones(Lk), bias = Row::Zero(Lk);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto qb = static_cast<Eigen::Index>(b * lq), kb = static_cast<Eigen::Index>(b * lk);
    bool any_kept = key_mask.empty();
    for (std::size_t j = 0; j < lk && !key_mask.empty(); ++j) {
      const bool masked = key_mask[b * lk + j] != 0;
      keep[static_cast<Eigen::Index>(j)] = masked ? T(0) : T(1);
      bias[static_cast<Eigen::Index>(j)] = masked ? -std::numeric_limits<T>::infinity() : T(0);
      any_kept = any_kept || !masked;
    }
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dk);
      auto P = mat(probs.data() + (b * heads + h) * lq * lk, lq, lk);
      if (!any_kept) {
        P.setZero();  // every key masked: the output rows stay zero
      } else {
        P.noalias() = Q.block(qb, c0, Lq, Dk) * K.block(kb, c0, Lk, Dk).transpose();
        for (Eigen::Index i = 0; i < Lq; ++i) {
          auto row = P.row(i).array();
          const T mx = (row * inv_sqrt + bias).maxCoeff();
          row = (row * inv_sqrt - mx).min(T(0)).exp() * keep;
          row /= row.sum();
        }
      }
      O.block(qb, c0, Lq, Dk).noalias() = P * V.block(kb, c0, Lk, Dk);
    }
  }
  if (probs_out) probs_out->assign(probs.begin(), probs.end());
  if (out.requires_grad()) {
    g.record([q, k, v, out, probs = std::move(probs), heads, batch, lq, lk, dk, D, inv_sqrt]() mutable {
      const auto Lq = static_cast<Eigen::Index>(lq), Lk = static_cast<Eigen::Index>(lk), Dk = static_cast<Eigen::Index>(dk);
      auto Q = mat(q.data(), q.rows(), D);
      auto K = mat(k.data(), k.rows(), D);
      auto V = mat(v.data(), v.rows(), D);
      auto GO = mat(out.grad_data(), out.rows(), D);
      T* gq = q.requires_grad() ? q.grad_data() : nullptr;
      T* gk = k.requires_grad() ? k.grad_data() : nullptr;
      T* gv = v.requires_grad() ? v.grad_data() : nullptr;
      Buffer<T> dbuf(lq * lk);
      auto dP = mat(dbuf.data(), lq, lk);
      for (std::size_t b = 0; b < batch; ++b) {
        const auto qb = static_cast<Eigen::Index>(b * lq), kb = static_cast<Eigen::Index>(b * lk);
        for (std::size_t h = 0; h < heads; ++h) {
          const auto c0 = static_cast<Eigen::Index>(h * dk);
          auto P = mat(probs.data() + (b * heads + h) * lq * lk, lq, lk);
          auto go = GO.block(qb, c0, Lq, Dk);
          if (gv) mat(gv, v.rows(), D).block(kb, c0, Lk, Dk).noalias() += P.transpose() * go;
          if (!gq && !gk) continue;
          dP.noalias() = go * V.block(kb, c0, Lk, Dk).transpose();
          for (std::size_t i = 0; i < lq; ++i) {
            const T* p = P.data() + i * lk;
            T* d = dbuf.data() + i * lk;
            T dot = 0;
            for (std::size_t j = 0; j < lk; ++j) dot += d[j] * p[j];
            for (std::size_t j = 0; j < lk; ++j) d[j] = p[j] * (d[j] - dot) * inv_sqrt;
          }
          if (gq) mat(gq, q.rows(), D).block(qb, c0, Lq, Dk).noalias() += dP * K.block(kb, c0, Lk, Dk);
          if (gk) mat(gk, k.rows(), D).block(kb, c0, Lk, Dk).noalias() += dP.transpose() * Q.block(qb, c0, Lq, Dk);
        }
      }
    });
  }
  return out;
}

}  // namespace ectrace::ad
