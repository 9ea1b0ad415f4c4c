#pragma once

// Dense float64 tensors with a reverse-mode tape.
//
// A Tensor is a cheap handle onto shared storage. Operations take the Tape
// explicitly and, when any input requires a gradient, append a backward
// closure. Tape::backward replays the closures in reverse recording order,
// adding into the gradient buffers of the inputs. Callers zero gradients
// between optimizer steps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cola/error.hpp"
#include "cola/util.hpp"

namespace cola {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
struct TensorStorage {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorStorage>()) {
    if (shape_size(shape) != values.size()) {
      throw DimensionError("shape " + shape_string(shape) + " holds " +
                           std::to_string(shape_size(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const void* id() const noexcept { return node_.get(); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<double> data() { return node_->value; }
  std::span<const double> data() const { return node_->value; }
  double* ptr() { return node_->value.data(); }
  const double* ptr() const { return node_->value.data(); }
  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradients live in the shared storage, so a const handle may accumulate.
  std::span<double> grad() const { return node_->grad; }
  double* grad_ptr() const { return node_->grad.data(); }
  void ensure_grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  }
  void zero_grad() const {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }
  void clear_grad() const { node_->grad.clear(); }

  /// Fresh storage with identical values; the gradient is not copied.
  Tensor deep_copy() const {
    return Tensor(node_->shape, node_->value, node_->requires_grad);
  }

  /// Overwrites values in place; shapes must match exactly.
  void assign(const Tensor& other) {
    if (other.shape() != shape()) {
      throw DimensionError("cannot assign " + shape_string(other.shape()) +
                           " into " + shape_string(shape()));
    }
    std::copy(other.node_->value.begin(), other.node_->value.end(),
              node_->value.begin());
  }

  double operator[](std::size_t i) const { return node_->value[i]; }

 private:
  std::shared_ptr<detail::TensorStorage> node_;
};

class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return ops_.size(); }

  void record(std::function<void()> backward) {
    if (recording_) ops_.push_back(std::move(backward));
  }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse.
  void backward(Tensor loss) {
    if (loss.size() != 1) {
      throw DimensionError("backward needs a scalar loss, got " +
                           shape_string(loss.shape()));
    }
    loss.ensure_grad();
    loss.grad()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

 private:
  bool recording_;
  std::vector<std::function<void()>> ops_;
};

namespace detail {

inline bool tracks(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_string(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural operations

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const bool track = detail::tracks(tape, {&a, &b});
  Tensor out = Tensor::zeros(a.shape(), track);
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (track) {
    tape.record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        t->ensure_grad();
        auto gt = t->grad();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const bool track = detail::tracks(tape, {&a, &b});
  Tensor out = Tensor::zeros(a.shape(), track);
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (track) {
    tape.record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        a.ensure_grad();
        auto ga = a.grad();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        auto gb = b.grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

inline Tensor sum(Tape& tape, const Tensor& x) {
  const bool track = detail::tracks(tape, {&x});
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::scalar(total, track);
  if (track) {
    tape.record([x, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      x.ensure_grad();
      for (double& gx : x.grad()) gx += g;
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& x) {
  const bool track = detail::tracks(tape, {&x});
  Tensor out = Tensor::zeros(x.shape(), track);
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
  if (track) {
    tape.record([x, out]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      auto g = out.grad();
      auto gx = x.grad();
      auto in = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (in[i] > 0.0) gx[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " to " +
                         shape_string(shape));
  }
  const bool track = detail::tracks(tape, {&x});
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()),
             track);
  if (track) {
    tape.record([x, out]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

/// Rows [begin, end) of a rank-2 tensor.
inline Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t begin,
                         std::size_t end) {
  detail::require_rank(x, 2, "slice_rows");
  if (begin > end || end > x.dim(0)) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") out of " + shape_string(x.shape()));
  }
  const std::size_t cols = x.dim(1);
  const bool track = detail::tracks(tape, {&x});
  Tensor out(Shape{end - begin, cols},
             std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                                 x.data().begin() + static_cast<std::ptrdiff_t>(end * cols)),
             track);
  if (track) {
    tape.record([x, out, begin, cols]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      auto g = out.grad();
      double* gx = x.grad_ptr() + begin * cols;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m x k] * b[k x n].
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ for " +
                         shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool track = detail::tracks(tape, {&a, &b});
  Tensor out = Tensor::zeros(Shape{m, n}, track);
  const double* A = a.ptr();
  const double* B = b.ptr();
  double* C = out.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  if (track) {
    tape.record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* G = out.grad_ptr();
      if (a.requires_grad()) {
        a.ensure_grad();
        double* GA = a.grad_ptr();
        const double* B = b.ptr();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
            GA[i * k + p] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        double* GB = b.grad_ptr();
        const double* A = a.ptr();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += aip * G[i * n + j];
          }
        }
      }
    });
  }
  return out;
}

/// a[m x k] * b[n x k]^T, used for the tied output projection.
inline Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: inner extents differ for " +
                         shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                         "^T");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  const bool track = detail::tracks(tape, {&a, &b});
  Tensor out = Tensor::zeros(Shape{m, n}, track);
  const double* A = a.ptr();
  const double* B = b.ptr();
  double* C = out.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = B + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      C[i * n + j] = acc;
    }
  }
  if (track) {
    tape.record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* G = out.grad_ptr();
      if (a.requires_grad()) {
        a.ensure_grad();
        double* GA = a.grad_ptr();
        const double* B = b.ptr();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const double g = G[i * n + j];
            if (g == 0.0) continue;
            const double* brow = B + j * k;
            for (std::size_t p = 0; p < k; ++p) GA[i * k + p] += g * brow[p];
          }
        }
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        double* GB = b.grad_ptr();
        const double* A = a.ptr();
        for (std::size_t i = 0; i < m; ++i) {
          const double* arow = A + i * k;
          for (std::size_t j = 0; j < n; ++j) {
            const double g = G[i * n + j];
            if (g == 0.0) continue;
            for (std::size_t p = 0; p < k; ++p) GB[j * k + p] += g * arow[p];
          }
        }
      }
    });
  }
  return out;
}

/// x[m x n] + bias[n], bias broadcast over rows.
inline Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  detail::require_rank(x, 2, "add_bias");
  if (bias.size() != x.dim(1)) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) +
                         " does not match " + shape_string(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  const bool track = detail::tracks(tape, {&x, &bias});
  Tensor out = Tensor::zeros(x.shape(), track);
  const double* X = x.ptr();
  const double* b = bias.ptr();
  double* O = out.ptr();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) O[i * n + j] = X[i * n + j] + b[j];
  if (track) {
    tape.record([x, bias, out, m, n]() mutable {
      if (!out.has_grad()) return;
      const double* G = out.grad_ptr();
      if (x.requires_grad()) {
        x.ensure_grad();
        double* GX = x.grad_ptr();
        for (std::size_t i = 0; i < m * n; ++i) GX[i] += G[i];
      }
      if (bias.requires_grad()) {
        bias.ensure_grad();
        double* GB = bias.grad_ptr();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) GB[j] += G[i * n + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along `axis`, max-subtracted.
inline Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of " +
                         shape_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t extent = x.dim(axis);
  const bool track = detail::tracks(tape, {&x});
  Tensor out = Tensor::zeros(x.shape(), track);
  const double* X = x.ptr();
  double* Y = out.ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < extent; ++j) mx = std::max(mx, X[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < extent; ++j) {
        const double e = std::exp(X[base + j * inner] - mx);
        Y[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < extent; ++j) Y[base + j * inner] /= total;
    }
  }
  if (track) {
    tape.record([x, out, outer, inner, extent]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      const double* G = out.grad_ptr();
      const double* Y = out.ptr();
      double* GX = x.grad_ptr();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * extent * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < extent; ++j)
            dot += G[base + j * inner] * Y[base + j * inner];
          for (std::size_t j = 0; j < extent; ++j) {
            const std::size_t idx = base + j * inner;
            GX[idx] += Y[idx] * (G[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Normalizes each row of x[m x n] to zero mean and unit variance, then
/// applies gain[n] and bias[n].
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain,
                         const Tensor& bias, double epsilon = kLayerNormEpsilon) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: affine parameters must have " +
                         std::to_string(n) + " entries");
  }
  const bool track = detail::tracks(tape, {&x, &gain, &bias});
  Tensor out = Tensor::zeros(x.shape(), track);
  std::vector<double> xhat(m * n);
  std::vector<double> inv_std(m);
  const double* X = x.ptr();
  const double* gm = gain.ptr();
  const double* bs = bias.ptr();
  double* Y = out.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = X + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + epsilon);
    inv_std[i] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mean) * inv;
      xhat[i * n + j] = h;
      Y[i * n + j] = gm[j] * h + bs[j];
    }
  }
  if (track) {
    tape.record([x, gain, bias, out, m, n, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)]() mutable {
      if (!out.has_grad()) return;
      const double* G = out.grad_ptr();
      if (gain.requires_grad()) {
        gain.ensure_grad();
        double* GG = gain.grad_ptr();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) GG[j] += G[i * n + j] * xhat[i * n + j];
      }
      if (bias.requires_grad()) {
        bias.ensure_grad();
        double* GB = bias.grad_ptr();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) GB[j] += G[i * n + j];
      }
      if (x.requires_grad()) {
        x.ensure_grad();
        double* GX = x.grad_ptr();
        const double* gm = gain.ptr();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = G[i * n + j] * gm[j];
            mean_d += d;
            mean_dx += d * xhat[i * n + j];
          }
          mean_d *= inv_n;
          mean_dx *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = G[i * n + j] * gm[j];
            GX[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lookup, regularization, loss

/// Gathers rows of table[V x d]; out[r] = table[ids[r]].
inline Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids) {
  detail::require_rank(table, 2, "embedding");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("embedding: id " + std::to_string(id) + " outside [0, " +
                       std::to_string(rows) + ")");
    }
  }
  const bool track = detail::tracks(tape, {&table});
  Tensor out = Tensor::zeros(Shape{ids.size(), d}, track);
  const double* T = table.ptr();
  double* O = out.ptr();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(T + static_cast<std::size_t>(ids[r]) * d, d, O + r * d);
  }
  if (track) {
    tape.record([table, out, d, ids = std::vector<int>(ids.begin(), ids.end())]() mutable {
      if (!out.has_grad()) return;
      table.ensure_grad();
      const double* G = out.grad_ptr();
      double* GT = table.grad_ptr();
      for (std::size_t r = 0; r < ids.size(); ++r) {
        double* dst = GT + static_cast<std::size_t>(ids[r]) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += G[r * d + j];
      }
    });
  }
  return out;
}

/// Inverted dropout; identity when rate is zero.
inline Tensor dropout(Tape& tape, const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ArgumentError("dropout rate must be below 1");
  const bool track = detail::tracks(tape, {&x});
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> scale(x.size());
  for (double& s : scale) s = uniform01(rng) < rate ? 0.0 : keep_scale;
  Tensor out = Tensor::zeros(x.shape(), track);
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] * scale[i];
  if (track) {
    tape.record([x, out, scale = std::move(scale)]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * scale[i];
    });
  }
  return out;
}

/// Mean negative log-likelihood over the rows whose mask entry is set.
/// `logits` is [... x N]; `targets` and `mask` hold one entry per row.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits,
                            std::span<const int> targets,
                            std::span<const std::uint8_t> mask) {
  if (logits.rank() < 1) throw DimensionError("cross_entropy: scalar logits");
  const std::size_t n = logits.dim(logits.rank() - 1);
  const std::size_t rows = logits.size() / n;
  if (targets.size() != rows || mask.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(rows) +
                         " rows but " + std::to_string(targets.size()) +
                         " targets and " + std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= n) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) +
                       " outside [0, " + std::to_string(n) + ")");
    }
    ++count;
  }
  if (count == 0) throw ArgumentError("cross_entropy: no valid prediction positions");

  const bool track = detail::tracks(tape, {&logits});
  const double* L = logits.ptr();
  std::vector<double> probs(track ? rows * n : 0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const double* row = L + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    total += log_z - row[targets[r]];
    if (track) {
      for (std::size_t j = 0; j < n; ++j) probs[r * n + j] = std::exp(row[j] - log_z);
    }
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(count), track);
  if (track) {
    tape.record([logits, out, n, rows, count, probs = std::move(probs),
                 targets = std::vector<int>(targets.begin(), targets.end()),
                 mask = std::vector<std::uint8_t>(mask.begin(), mask.end())]() mutable {
      if (!out.has_grad()) return;
      logits.ensure_grad();
      const double g = out.grad()[0] / static_cast<double>(count);
      double* GL = logits.grad_ptr();
      for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        for (std::size_t j = 0; j < n; ++j) GL[r * n + j] += g * probs[r * n + j];
        GL[r * n + static_cast<std::size_t>(targets[r])] -= g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Causal multi-head attention kernel

/// Attention probabilities captured during a forward pass, laid out as
/// [batch][head][query][key]; entries above the diagonal are zero.
struct AttentionWeights {
  std::size_t batch = 0;
  std::size_t heads = 0;
  std::size_t length = 0;
  std::vector<double> probs;

  double at(std::size_t b, std::size_t h, std::size_t t, std::size_t s) const {
    return probs[((b * heads + h) * length + t) * length + s];
  }
};

struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t length = 1;
  std::size_t heads = 1;
};

/// Scaled dot-product attention over q, k, v of shape [(batch*length) x d].
/// Query t of sequence b attends to keys s <= min(t, lengths[b]-1). The
/// optional dropout is applied to the probabilities. When `capture` is set
/// it receives the pre-dropout probabilities.
inline Tensor causal_attention(Tape& tape, const Tensor& q, const Tensor& k,
                               const Tensor& v, const AttentionLayout& layout,
                               std::span<const std::size_t> lengths,
                               double dropout_rate = 0.0, Rng* rng = nullptr,
                               AttentionWeights* capture = nullptr) {
  const std::size_t B = layout.batch, T = layout.length, H = layout.heads;
  for (const Tensor* t : {&q, &k, &v}) detail::require_rank(*t, 2, "causal_attention");
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.dim(0) != B * T) {
    throw DimensionError("causal_attention: q/k/v must all be [" +
                         std::to_string(B * T) + " x d], got " +
                         shape_string(q.shape()) + ", " + shape_string(k.shape()) +
                         ", " + shape_string(v.shape()));
  }
  const std::size_t D = q.dim(1);
  if (H == 0 || D % H != 0) {
    throw DimensionError("causal_attention: " + std::to_string(H) +
                         " heads do not divide width " + std::to_string(D));
  }
  if (lengths.size() != B) throw DimensionError("causal_attention: one length per sequence");
  if (dropout_rate > 0.0 && rng == nullptr) {
    throw ArgumentError("causal_attention: dropout needs a generator");
  }
  const std::size_t dh = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool track = detail::tracks(tape, {&q, &k, &v});

  std::vector<double> probs(B * H * T * T, 0.0);
  std::vector<double> dropped;  // probabilities after dropout, when active
  const bool use_dropout = dropout_rate > 0.0;
  if (use_dropout) dropped.assign(probs.size(), 0.0);
  const double keep_scale = use_dropout ? 1.0 / (1.0 - dropout_rate) : 1.0;

  Tensor out = Tensor::zeros(Shape{B * T, D}, track);
  const double* Q = q.ptr();
  const double* K = k.ptr();
  const double* V = v.ptr();
  double* O = out.ptr();

  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = std::min(lengths[b], T);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t last = std::min(t + 1, len);  // keys [0, last)
        if (last == 0) continue;
        double* P = probs.data() + ((b * H + h) * T + t) * T;
        const double* qrow = Q + (b * T + t) * D + off;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < last; ++s) {
          const double* krow = K + (b * T + s) * D + off;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qrow[c] * krow[c];
          P[s] = dot * scale;
          mx = std::max(mx, P[s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s < last; ++s) {
          P[s] = std::exp(P[s] - mx);
          z += P[s];
        }
        for (std::size_t s = 0; s < last; ++s) P[s] /= z;
        const double* W = P;
        if (use_dropout) {
          double* Pd = dropped.data() + ((b * H + h) * T + t) * T;
          for (std::size_t s = 0; s < last; ++s) {
            Pd[s] = uniform01(*rng) < dropout_rate ? 0.0 : P[s] * keep_scale;
          }
          W = Pd;
        }
        double* orow = O + (b * T + t) * D + off;
        for (std::size_t s = 0; s < last; ++s) {
          const double w = W[s];
          const double* vrow = V + (b * T + s) * D + off;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += w * vrow[c];
        }
      }
    }
  }
  if (capture) {
    capture->batch = B;
    capture->heads = H;
    capture->length = T;
    capture->probs = probs;
  }
  if (track) {
    tape.record([q, k, v, out, B, T, H, D, dh, scale, keep_scale, use_dropout,
                 lens = std::vector<std::size_t>(lengths.begin(), lengths.end()),
                 probs = std::move(probs), dropped = std::move(dropped)]() mutable {
      if (!out.has_grad()) return;
      for (const Tensor* t : {&q, &k, &v})
        if (t->requires_grad()) t->ensure_grad();
      const double* G = out.grad_ptr();
      const double* Q = q.ptr();
      const double* K = k.ptr();
      const double* V = v.ptr();
      double* GQ = q.requires_grad() ? q.grad_ptr() : nullptr;
      double* GK = k.requires_grad() ? k.grad_ptr() : nullptr;
      double* GV = v.requires_grad() ? v.grad_ptr() : nullptr;
      std::vector<double> dP(T);
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t len = std::min(lens[b], T);
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t t = 0; t < T; ++t) {
            const std::size_t last = std::min(t + 1, len);
            if (last == 0) continue;
            const std::size_t prow = ((b * H + h) * T + t) * T;
            const double* P = probs.data() + prow;
            const double* W = use_dropout ? dropped.data() + prow : P;
            const double* grow = G + (b * T + t) * D + off;
            for (std::size_t s = 0; s < last; ++s) {
              const double* vrow = V + (b * T + s) * D + off;
              double dot = 0.0;
              for (std::size_t c = 0; c < dh; ++c) dot += grow[c] * vrow[c];
              dP[s] = dot;
              if (GV) {
                double* gv = GV + (b * T + s) * D + off;
                for (std::size_t c = 0; c < dh; ++c) gv[c] += W[s] * grow[c];
              }
            }
            if (use_dropout) {
              for (std::size_t s = 0; s < last; ++s)
                dP[s] = W[s] == 0.0 ? 0.0 : dP[s] * keep_scale;
            }
            double row_dot = 0.0;
            for (std::size_t s = 0; s < last; ++s) row_dot += P[s] * dP[s];
            const double* qrow = Q + (b * T + t) * D + off;
            double* gq = GQ ? GQ + (b * T + t) * D + off : nullptr;
            for (std::size_t s = 0; s < last; ++s) {
              const double ds = P[s] * (dP[s] - row_dot) * scale;
              if (ds == 0.0) continue;
              const double* krow = K + (b * T + s) * D + off;
              if (gq)
                for (std::size_t c = 0; c < dh; ++c) gq[c] += ds * krow[c];
              if (GK) {
                double* gk = GK + (b * T + s) * D + off;
                for (std::size_t c = 0; c < dh; ++c) gk[c] += ds * qrow[c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace cola
