#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "bissm/tensor.hpp"

namespace bissm {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename T, typename Fill>
void grad_into(const std::shared_ptr<TensorImpl<T>>& p, Fill&& fill) {
  if (!p->tracked) return;
  p->ensure_grad();
  fill(p->grad.data());
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + detail::shape_str(a.shape()) + " x " +
                     detail::shape_str(b.shape()));
  const Dim m = a.dim(0), k = a.dim(1), n = b.dim(1);
  count_macs(m * k * n);

  auto out = detail::make_op_result<T>(
      {m, n}, {a.impl(), b.impl()},
      [ai = a.impl(), bi = b.impl(), m, k, n](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        detail::grad_into<T>(ai, [&](T* ga) {
          const T* bv = bi->value.data();
          for (Dim i = 0; i < m; ++i)
            for (Dim kk = 0; kk < k; ++kk) {
              T acc = 0;
              const T* grow = g + i * n;
              const T* brow = bv + kk * n;
              for (Dim j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[i * k + kk] += acc;
            }
        });
        detail::grad_into<T>(bi, [&](T* gb) {
          const T* av = ai->value.data();
          for (Dim i = 0; i < m; ++i)
            for (Dim kk = 0; kk < k; ++kk) {
              const T aik = av[i * k + kk];
              const T* grow = g + i * n;
              T* gbrow = gb + kk * n;
              for (Dim j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
            }
        });
      });

  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* cv = out.values_mut().data();
  for (Dim i = 0; i < m; ++i) {
    const T* arow = av + i * k;
    T* crow = cv + i * n;
    for (Dim kk = 0; kk < k; ++kk) {
      const T aik = arow[kk];
      const T* brow = bv + kk * n;
      for (Dim j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Broadcast elementwise arithmetic. Supported layouts: identical shapes,
// matrix (+|*) row vector, and anything (+|*) scalar.
// ---------------------------------------------------------------------------

namespace detail {

enum class Broadcast { same, row_rhs, scalar_rhs };

template <typename T>
Broadcast classify_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.numel() == 1) return Broadcast::scalar_rhs;
  if (a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0)) return Broadcast::row_rhs;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                   shape_str(b.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto kind = detail::classify_broadcast(a, b, "add");
  const Dim n = a.numel();
  const Dim cols = kind == detail::Broadcast::row_rhs ? a.dim(1) : 0;

  auto out = detail::make_op_result<T>(
      a.shape(), {a.impl(), b.impl()},
      [ai = a.impl(), bi = b.impl(), kind, n, cols](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        detail::grad_into<T>(ai, [&](T* ga) {
          for (Dim i = 0; i < n; ++i) ga[i] += g[i];
        });
        detail::grad_into<T>(bi, [&](T* gb) {
          switch (kind) {
            case detail::Broadcast::same:
              for (Dim i = 0; i < n; ++i) gb[i] += g[i];
              break;
            case detail::Broadcast::row_rhs:
              for (Dim i = 0; i < n; ++i) gb[i % cols] += g[i];
              break;
            case detail::Broadcast::scalar_rhs: {
              T acc = 0;
              for (Dim i = 0; i < n; ++i) acc += g[i];
              gb[0] += acc;
              break;
            }
          }
        });
      });

  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.values_mut().data();
  switch (kind) {
    case detail::Broadcast::same:
      for (Dim i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
      break;
    case detail::Broadcast::row_rhs:
      for (Dim i = 0; i < n; ++i) ov[i] = av[i] + bv[i % cols];
      break;
    case detail::Broadcast::scalar_rhs:
      for (Dim i = 0; i < n; ++i) ov[i] = av[i] + bv[0];
      break;
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto kind = detail::classify_broadcast(a, b, "mul");
  const Dim n = a.numel();
  const Dim cols = kind == detail::Broadcast::row_rhs ? a.dim(1) : 0;

  auto out = detail::make_op_result<T>(
      a.shape(), {a.impl(), b.impl()},
      [ai = a.impl(), bi = b.impl(), kind, n, cols](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        const T* av = ai->value.data();
        const T* bv = bi->value.data();
        detail::grad_into<T>(ai, [&](T* ga) {
          switch (kind) {
            case detail::Broadcast::same:
              for (Dim i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
              break;
            case detail::Broadcast::row_rhs:
              for (Dim i = 0; i < n; ++i) ga[i] += g[i] * bv[i % cols];
              break;
            case detail::Broadcast::scalar_rhs:
              for (Dim i = 0; i < n; ++i) ga[i] += g[i] * bv[0];
              break;
          }
        });
        detail::grad_into<T>(bi, [&](T* gb) {
          switch (kind) {
            case detail::Broadcast::same:
              for (Dim i = 0; i < n; ++i) gb[i] += g[i] * av[i];
              break;
            case detail::Broadcast::row_rhs:
              for (Dim i = 0; i < n; ++i) gb[i % cols] += g[i] * av[i];
              break;
            case detail::Broadcast::scalar_rhs: {
              T acc = 0;
              for (Dim i = 0; i < n; ++i) acc += g[i] * av[i];
              gb[0] += acc;
              break;
            }
          }
        });
      });

  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.values_mut().data();
  switch (kind) {
    case detail::Broadcast::same:
      for (Dim i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
      break;
    case detail::Broadcast::row_rhs:
      for (Dim i = 0; i < n; ++i) ov[i] = av[i] * bv[i % cols];
      break;
    case detail::Broadcast::scalar_rhs:
      for (Dim i = 0; i < n; ++i) ov[i] = av[i] * bv[0];
      break;
  }
  return out;
}

// Scale by a plain constant (no graph edge for the constant).
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  const Dim n = a.numel();
  auto out = detail::make_op_result<T>(a.shape(), {a.impl()},
                                       [ai = a.impl(), c, n](detail::TensorImpl<T>& o) {
                                         const T* g = o.grad.data();
                                         detail::grad_into<T>(ai, [&](T* ga) {
                                           for (Dim i = 0; i < n; ++i) ga[i] += g[i] * c;
                                         });
                                       });
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  for (Dim i = 0; i < n; ++i) ov[i] = av[i] * c;
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

namespace detail {

// fwd(x) -> value, dfdx(x, y) -> derivative; y is the forward output.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Deriv dfdx) {
  const Dim n = a.numel();
  auto out = detail::make_op_result<T>(
      a.shape(), {a.impl()}, [ai = a.impl(), dfdx, n](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        const T* x = ai->value.data();
        const T* y = o.value.data();
        detail::grad_into<T>(ai, [&](T* ga) {
          for (Dim i = 0; i < n; ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
        });
      });
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  for (Dim i = 0; i < n; ++i) ov[i] = fwd(av[i]);
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
T softplus_scalar(T x) {
  // Stable in both tails: ln(1+e^x) = max(x,0) + log1p(e^{-|x|}).
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return softplus_scalar(x); }, [](T x, T) { return detail::sigmoid(x); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x * detail::sigmoid(x); },
      [](T x, T) {
        const T s = detail::sigmoid(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::unary_op(
      a, [](T x) { return T(0.5) * x * (T(1) + static_cast<T>(std::erf(x * inv_sqrt2))); },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + static_cast<T>(std::erf(x * inv_sqrt2)));
        const T pdf = static_cast<T>(inv_sqrt2pi * std::exp(-0.5 * double(x) * double(x)));
        return cdf + x * pdf;
      });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Row-wise RMS normalization with a learned per-column gain.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, T eps = T(1e-6)) {
  if (x.rank() != 2 || weight.rank() != 1 || weight.dim(0) != x.dim(1))
    throw ShapeError("rms_norm: want (L x d) and (d), got " + detail::shape_str(x.shape()) + " / " +
                     detail::shape_str(weight.shape()));
  const Dim rows = x.dim(0), d = x.dim(1);

  std::vector<T> rinv(static_cast<std::size_t>(rows));
  const T* xv = x.values().data();
  for (Dim t = 0; t < rows; ++t) {
    T ss = 0;
    const T* row = xv + t * d;
    for (Dim i = 0; i < d; ++i) ss += row[i] * row[i];
    rinv[static_cast<std::size_t>(t)] = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
  }

  auto out = detail::make_op_result<T>(
      x.shape(), {x.impl(), weight.impl()},
      [xi = x.impl(), wi = weight.impl(), rinv, rows, d](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        const T* xv2 = xi->value.data();
        const T* wv = wi->value.data();
        detail::grad_into<T>(xi, [&](T* gx) {
          for (Dim t = 0; t < rows; ++t) {
            const T r = rinv[static_cast<std::size_t>(t)];
            const T* xrow = xv2 + t * d;
            const T* grow = g + t * d;
            T dot = 0;  // sum_i g_i * w_i * x_i
            for (Dim i = 0; i < d; ++i) dot += grow[i] * wv[i] * xrow[i];
            const T coef = dot * r * r * r / static_cast<T>(d);
            T* gxrow = gx + t * d;
            for (Dim i = 0; i < d; ++i) gxrow[i] += r * wv[i] * grow[i] - xrow[i] * coef;
          }
        });
        detail::grad_into<T>(wi, [&](T* gw) {
          for (Dim t = 0; t < rows; ++t) {
            const T r = rinv[static_cast<std::size_t>(t)];
            const T* xrow = xv2 + t * d;
            const T* grow = g + t * d;
            for (Dim i = 0; i < d; ++i) gw[i] += grow[i] * xrow[i] * r;
          }
        });
      });

  const T* wv = weight.values().data();
  T* ov = out.values_mut().data();
  for (Dim t = 0; t < rows; ++t) {
    const T r = rinv[static_cast<std::size_t>(t)];
    const T* row = xv + t * d;
    T* orow = ov + t * d;
    for (Dim i = 0; i < d; ++i) orow[i] = row[i] * r * wv[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Index and layout ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reverse_along_axis(const Tensor<T>& x, int axis) {
  if (x.rank() == 1) {
    if (axis != 0) throw ShapeError("reverse_along_axis: axis out of range for rank-1 tensor");
  } else if (x.rank() == 2) {
    if (axis != 0 && axis != 1) throw ShapeError("reverse_along_axis: axis out of range for rank-2 tensor");
  } else {
    throw ShapeError("reverse_along_axis: rank 1 or 2 only");
  }
  const Dim rows = x.rank() == 1 ? x.dim(0) : x.dim(0);
  const Dim cols = x.rank() == 1 ? 1 : x.dim(1);
  const bool flip_rows = (x.rank() == 1) || axis == 0;

  auto apply = [rows, cols, flip_rows](const T* src, T* dst, bool accumulate) {
    for (Dim i = 0; i < rows; ++i)
      for (Dim j = 0; j < cols; ++j) {
        const Dim si = flip_rows ? (rows - 1 - i) : i;
        const Dim sj = flip_rows ? j : (cols - 1 - j);
        if (accumulate)
          dst[i * cols + j] += src[si * cols + sj];
        else
          dst[i * cols + j] = src[si * cols + sj];
      }
  };

  auto out = detail::make_op_result<T>(x.shape(), {x.impl()},
                                       [xi = x.impl(), apply](detail::TensorImpl<T>& o) {
                                         detail::grad_into<T>(xi, [&](T* gx) {
                                           apply(o.grad.data(), gx, true);
                                         });
                                       });
  apply(x.values().data(), out.values_mut().data(), false);
  return out;
}

/// Select rows by index; the backward pass scatter-adds into the source.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<Dim> indices) {
  if (x.rank() != 2) throw ShapeError("gather_rows: rank-2 input required");
  const Dim rows = x.dim(0), cols = x.dim(1);
  for (Dim idx : indices)
    if (idx < 0 || idx >= rows)
      throw ShapeError("gather_rows: index " + std::to_string(idx) + " out of range [0, " +
                       std::to_string(rows) + ")");
  const Dim m = static_cast<Dim>(indices.size());

  auto out = detail::make_op_result<T>(
      {m, cols}, {x.impl()}, [xi = x.impl(), indices, cols, m](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        detail::grad_into<T>(xi, [&](T* gx) {
          for (Dim r = 0; r < m; ++r) {
            T* dst = gx + indices[static_cast<std::size_t>(r)] * cols;
            const T* src = g + r * cols;
            for (Dim j = 0; j < cols; ++j) dst[j] += src[j];
          }
        });
      });

  const T* xv = x.values().data();
  T* ov = out.values_mut().data();
  for (Dim r = 0; r < m; ++r) {
    const T* src = xv + indices[static_cast<std::size_t>(r)] * cols;
    std::copy(src, src + cols, ov + r * cols);
  }
  return out;
}

/// Copy with the given rows forced to zero (and no gradient through them).
template <typename T>
Tensor<T> zero_rows(const Tensor<T>& x, const std::vector<Dim>& indices) {
  if (x.rank() != 2) throw ShapeError("zero_rows: rank-2 input required");
  const Dim rows = x.dim(0), cols = x.dim(1);
  std::vector<char> dead(static_cast<std::size_t>(rows), 0);
  for (Dim idx : indices) {
    if (idx < 0 || idx >= rows)
      throw ShapeError("zero_rows: index " + std::to_string(idx) + " out of range");
    dead[static_cast<std::size_t>(idx)] = 1;
  }

  auto out = detail::make_op_result<T>(
      x.shape(), {x.impl()}, [xi = x.impl(), dead, rows, cols](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        detail::grad_into<T>(xi, [&](T* gx) {
          for (Dim i = 0; i < rows; ++i) {
            if (dead[static_cast<std::size_t>(i)]) continue;
            for (Dim j = 0; j < cols; ++j) gx[i * cols + j] += g[i * cols + j];
          }
        });
      });

  const T* xv = x.values().data();
  T* ov = out.values_mut().data();
  for (Dim i = 0; i < rows; ++i) {
    if (dead[static_cast<std::size_t>(i)]) continue;
    std::copy(xv + i * cols, xv + (i + 1) * cols, ov + i * cols);
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, Dim c0, Dim c1) {
  if (x.rank() != 2) throw ShapeError("slice_cols: rank-2 input required");
  const Dim rows = x.dim(0), cols = x.dim(1);
  if (c0 < 0 || c1 > cols || c0 >= c1)
    throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                     ") for " + std::to_string(cols) + " columns");
  const Dim w = c1 - c0;

  auto out = detail::make_op_result<T>(
      {rows, w}, {x.impl()}, [xi = x.impl(), c0, w, rows, cols](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        detail::grad_into<T>(xi, [&](T* gx) {
          for (Dim i = 0; i < rows; ++i)
            for (Dim j = 0; j < w; ++j) gx[i * cols + c0 + j] += g[i * w + j];
        });
      });

  const T* xv = x.values().data();
  T* ov = out.values_mut().data();
  for (Dim i = 0; i < rows; ++i)
    std::copy(xv + i * cols + c0, xv + i * cols + c1, ov + i * w);
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const Dim n = x.numel();
  auto out = detail::make_op_result<T>({}, {x.impl()},
                                       [xi = x.impl(), n](detail::TensorImpl<T>& o) {
                                         const T g = o.grad[0];
                                         detail::grad_into<T>(xi, [&](T* gx) {
                                           for (Dim i = 0; i < n; ++i) gx[i] += g;
                                         });
                                       });
  const T* xv = x.values().data();
  T acc = 0;
  for (Dim i = 0; i < n; ++i) acc += xv[i];
  out.values_mut()[0] = acc;
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ValueError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Column means: (N x d) -> (1 x d).
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(0) == 0) throw ShapeError("mean_rows: non-empty rank-2 input required");
  const Dim rows = x.dim(0), cols = x.dim(1);
  const T inv = T(1) / static_cast<T>(rows);

  auto out = detail::make_op_result<T>(
      {1, cols}, {x.impl()}, [xi = x.impl(), rows, cols, inv](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        detail::grad_into<T>(xi, [&](T* gx) {
          for (Dim i = 0; i < rows; ++i)
            for (Dim j = 0; j < cols; ++j) gx[i * cols + j] += g[j] * inv;
        });
      });

  const T* xv = x.values().data();
  T* ov = out.values_mut().data();
  for (Dim i = 0; i < rows; ++i)
    for (Dim j = 0; j < cols; ++j) ov[j] += xv[i * cols + j] * inv;
  return out;
}

/// Per-channel-row pooling for a time-major token grid: token t'*rows + r
/// belongs to channel row r. (N x d) -> (rows x d).
template <typename T>
Tensor<T> channel_row_mean(const Tensor<T>& x, Dim rows_c) {
  if (x.rank() != 2) throw ShapeError("channel_row_mean: rank-2 input required");
  const Dim n = x.dim(0), cols = x.dim(1);
  if (rows_c <= 0 || n % rows_c != 0)
    throw ShapeError("channel_row_mean: token count " + std::to_string(n) +
                     " not divisible by channel rows " + std::to_string(rows_c));
  const Dim steps = n / rows_c;
  const T inv = T(1) / static_cast<T>(steps);

  auto out = detail::make_op_result<T>(
      {rows_c, cols}, {x.impl()},
      [xi = x.impl(), rows_c, steps, cols, inv](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        detail::grad_into<T>(xi, [&](T* gx) {
          for (Dim t = 0; t < steps; ++t)
            for (Dim r = 0; r < rows_c; ++r) {
              const T* grow = g + r * cols;
              T* gxrow = gx + (t * rows_c + r) * cols;
              for (Dim j = 0; j < cols; ++j) gxrow[j] += grow[j] * inv;
            }
        });
      });

  const T* xv = x.values().data();
  T* ov = out.values_mut().data();
  for (Dim t = 0; t < steps; ++t)
    for (Dim r = 0; r < rows_c; ++r) {
      const T* xrow = xv + (t * rows_c + r) * cols;
      T* orow = ov + r * cols;
      for (Dim j = 0; j < cols; ++j) orow[j] += xrow[j] * inv;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// Non-overlapping patch projection: kernel (kh x kw), stride = kernel.
/// Input (C x T) is implicitly zero-padded on the right/bottom to multiples
/// of the kernel; output rows are time-major (token = t'*C' + c').
template <typename T>
Tensor<T> conv2d_patchify(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Dim kh,
                          Dim kw) {
  if (x.rank() != 2) throw ShapeError("conv2d_patchify: rank-2 input required");
  if (kh <= 0 || kw <= 0) throw ShapeError("conv2d_patchify: kernel dims must be positive");
  const Dim c = x.dim(0), t = x.dim(1);
  if (c < 1 || t < 1) throw ShapeError("conv2d_patchify: empty input");
  const Dim grid_c = (c + kh - 1) / kh;
  const Dim grid_t = (t + kw - 1) / kw;
  const Dim n = grid_c * grid_t;
  const Dim patch = kh * kw;
  if (w.rank() != 2 || w.dim(1) != patch)
    throw ShapeError("conv2d_patchify: weight must be (d x " + std::to_string(patch) + "), got " +
                     detail::shape_str(w.shape()));
  const Dim d = w.dim(0);
  if (bias.rank() != 1 || bias.dim(0) != d) throw ShapeError("conv2d_patchify: bias must be (d)");
  count_macs(n * d * patch);

  // token r = t'*grid_c + c'; element (i,j) of its patch sits at
  // x[c'*kh + i, t'*kw + j] when inside the signal, else zero.
  auto patch_source = [=](Dim r, Dim e) -> Dim {
    const Dim tp = r / grid_c, cp = r % grid_c;
    const Dim i = e / kw, j = e % kw;
    const Dim row = cp * kh + i, col = tp * kw + j;
    if (row >= c || col >= t) return -1;
    return row * t + col;
  };

  auto out = detail::make_op_result<T>(
      {n, d}, {x.impl(), w.impl(), bias.impl()},
      [xi = x.impl(), wi = w.impl(), bi = bias.impl(), patch_source, n, d,
       patch](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        const T* wv = wi->value.data();
        const T* xv = xi->value.data();
        detail::grad_into<T>(xi, [&](T* gx) {
          for (Dim r = 0; r < n; ++r)
            for (Dim e = 0; e < patch; ++e) {
              const Dim src = patch_source(r, e);
              if (src < 0) continue;
              T acc = 0;
              for (Dim o2 = 0; o2 < d; ++o2) acc += g[r * d + o2] * wv[o2 * patch + e];
              gx[src] += acc;
            }
        });
        detail::grad_into<T>(wi, [&](T* gw) {
          for (Dim r = 0; r < n; ++r)
            for (Dim e = 0; e < patch; ++e) {
              const Dim src = patch_source(r, e);
              if (src < 0) continue;
              const T xv_e = xv[src];
              for (Dim o2 = 0; o2 < d; ++o2) gw[o2 * patch + e] += g[r * d + o2] * xv_e;
            }
        });
        detail::grad_into<T>(bi, [&](T* gb) {
          for (Dim r = 0; r < n; ++r)
            for (Dim o2 = 0; o2 < d; ++o2) gb[o2] += g[r * d + o2];
        });
      });

  const T* xv = x.values().data();
  const T* wv = w.values().data();
  const T* bv = bias.values().data();
  T* ov = out.values_mut().data();
  std::vector<T> buf(static_cast<std::size_t>(patch));
  for (Dim r = 0; r < n; ++r) {
    for (Dim e = 0; e < patch; ++e) {
      const Dim src = patch_source(r, e);
      buf[static_cast<std::size_t>(e)] = src < 0 ? T(0) : xv[src];
    }
    T* orow = ov + r * d;
    for (Dim o2 = 0; o2 < d; ++o2) {
      T acc = bv[o2];
      const T* wrow = wv + o2 * patch;
      for (Dim e = 0; e < patch; ++e) acc += wrow[e] * buf[static_cast<std::size_t>(e)];
      orow[o2] = acc;
    }
  }
  return out;
}

/// Depthwise causal conv along the sequence axis; left zero padding K-1.
template <typename T>
Tensor<T> conv1d_depthwise_causal(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() != 2 || w.rank() != 2 || w.dim(0) != x.dim(1))
    throw ShapeError("conv1d_depthwise_causal: want (L x D) and (D x K)");
  const Dim len = x.dim(0), ch = x.dim(1), k = w.dim(1);
  count_macs(len * ch * k);

  auto out = detail::make_op_result<T>(
      x.shape(), {x.impl(), w.impl()},
      [xi = x.impl(), wi = w.impl(), len, ch, k](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        const T* wv = wi->value.data();
        const T* xv = xi->value.data();
        detail::grad_into<T>(xi, [&](T* gx) {
          for (Dim t = 0; t < len; ++t)
            for (Dim i = 0; i < k; ++i) {
              const Dim src = t - (k - 1) + i;
              if (src < 0) continue;
              for (Dim d = 0; d < ch; ++d) gx[src * ch + d] += g[t * ch + d] * wv[d * k + i];
            }
        });
        detail::grad_into<T>(wi, [&](T* gw) {
          for (Dim t = 0; t < len; ++t)
            for (Dim i = 0; i < k; ++i) {
              const Dim src = t - (k - 1) + i;
              if (src < 0) continue;
              for (Dim d = 0; d < ch; ++d) gw[d * k + i] += g[t * ch + d] * xv[src * ch + d];
            }
        });
      });

  const T* xv = x.values().data();
  const T* wv = w.values().data();
  T* ov = out.values_mut().data();
  for (Dim t = 0; t < len; ++t)
    for (Dim i = 0; i < k; ++i) {
      const Dim src = t - (k - 1) + i;
      if (src < 0) continue;
      for (Dim d = 0; d < ch; ++d) ov[t * ch + d] += xv[src * ch + d] * wv[d * k + i];
    }
  return out;
}

/// Dense same-padding conv along the sequence axis (odd kernel width).
/// x (L x Cin), w (Cout x Cin x K) flattened row-major, bias (Cout).
template <typename T>
Tensor<T> conv1d_same(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Dim k) {
  if (x.rank() != 2 || w.rank() != 3) throw ShapeError("conv1d_same: want (L x Cin) and (Cout x Cin x K)");
  if (k % 2 == 0) throw ShapeError("conv1d_same: kernel width must be odd");
  const Dim len = x.dim(0), cin = x.dim(1);
  if (w.dim(1) != cin || w.dim(2) != k) throw ShapeError("conv1d_same: weight shape mismatch");
  const Dim cout = w.dim(0);
  if (bias.rank() != 1 || bias.dim(0) != cout) throw ShapeError("conv1d_same: bias must be (Cout)");
  const Dim pad = k / 2;
  count_macs(len * cout * cin * k);

  auto out = detail::make_op_result<T>(
      {len, cout}, {x.impl(), w.impl(), bias.impl()},
      [xi = x.impl(), wi = w.impl(), bi = bias.impl(), len, cin, cout, k,
       pad](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        const T* wv = wi->value.data();
        const T* xv = xi->value.data();
        detail::grad_into<T>(xi, [&](T* gx) {
          for (Dim t = 0; t < len; ++t)
            for (Dim i = 0; i < k; ++i) {
              const Dim src = t + i - pad;
              if (src < 0 || src >= len) continue;
              for (Dim oc = 0; oc < cout; ++oc) {
                const T go = g[t * cout + oc];
                const T* wrow = wv + (oc * cin + 0) * k;
                for (Dim ic = 0; ic < cin; ++ic)
                  gx[src * cin + ic] += go * wrow[ic * k + i];
              }
            }
        });
        detail::grad_into<T>(wi, [&](T* gw) {
          for (Dim t = 0; t < len; ++t)
            for (Dim i = 0; i < k; ++i) {
              const Dim src = t + i - pad;
              if (src < 0 || src >= len) continue;
              for (Dim oc = 0; oc < cout; ++oc) {
                const T go = g[t * cout + oc];
                for (Dim ic = 0; ic < cin; ++ic)
                  gw[(oc * cin + ic) * k + i] += go * xv[src * cin + ic];
              }
            }
        });
        detail::grad_into<T>(bi, [&](T* gb) {
          for (Dim t = 0; t < len; ++t)
            for (Dim oc = 0; oc < cout; ++oc) gb[oc] += g[t * cout + oc];
        });
      });

  const T* xv = x.values().data();
  const T* wv = w.values().data();
  const T* bv = bias.values().data();
  T* ov = out.values_mut().data();
  for (Dim t = 0; t < len; ++t)
    for (Dim oc = 0; oc < cout; ++oc) ov[t * cout + oc] = bv[oc];
  for (Dim t = 0; t < len; ++t)
    for (Dim i = 0; i < k; ++i) {
      const Dim src = t + i - pad;
      if (src < 0 || src >= len) continue;
      for (Dim oc = 0; oc < cout; ++oc) {
        T acc = 0;
        const T* xrow = xv + src * cin;
        const T* wrow = wv + oc * cin * k + i;
        for (Dim ic = 0; ic < cin; ++ic) acc += xrow[ic] * wrow[ic * k];
        ov[t * cout + oc] += acc;
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Elementwise smooth-L1: 0.5 d^2 / beta inside |d| < beta, |d| - 0.5 beta
/// outside (beta = 1 recovers the usual quadratic/linear split).
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target, T beta = T(1)) {
  detail::require_same_shape(pred, target, "smooth_l1");
  if (beta <= T(0)) throw ValueError("smooth_l1: beta must be positive");
  const Dim n = pred.numel();

  auto out = detail::make_op_result<T>(
      pred.shape(), {pred.impl(), target.impl()},
      [pi = pred.impl(), ti = target.impl(), beta, n](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        const T* pv = pi->value.data();
        const T* tv = ti->value.data();
        auto deriv = [beta](T d) {
          if (std::abs(d) < beta) return d / beta;
          return d > T(0) ? T(1) : T(-1);
        };
        detail::grad_into<T>(pi, [&](T* gp) {
          for (Dim i = 0; i < n; ++i) gp[i] += g[i] * deriv(pv[i] - tv[i]);
        });
        detail::grad_into<T>(ti, [&](T* gt) {
          for (Dim i = 0; i < n; ++i) gt[i] -= g[i] * deriv(pv[i] - tv[i]);
        });
      });

  const T* pv = pred.values().data();
  const T* tv = target.values().data();
  T* ov = out.values_mut().data();
  for (Dim i = 0; i < n; ++i) {
    const T d = pv[i] - tv[i];
    ov[i] = std::abs(d) < beta ? T(0.5) * d * d / beta : std::abs(d) - T(0.5) * beta;
  }
  return out;
}

/// Mean softmax cross-entropy over rows; labels index columns.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: rank-2 logits required");
  const Dim rows = logits.dim(0), k = logits.dim(1);
  if (static_cast<Dim>(labels.size()) != rows)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  for (int lab : labels)
    if (lab < 0 || lab >= k) throw ValueError("softmax_cross_entropy: label out of range");

  auto out = detail::make_op_result<T>(
      {}, {logits.impl()}, [li = logits.impl(), labels, rows, k](detail::TensorImpl<T>& o) {
        const T g = o.grad[0] / static_cast<T>(rows);
        const T* zv = li->value.data();
        detail::grad_into<T>(li, [&](T* gz) {
          for (Dim r = 0; r < rows; ++r) {
            const T* row = zv + r * k;
            T m = row[0];
            for (Dim j = 1; j < k; ++j) m = std::max(m, row[j]);
            T denom = 0;
            for (Dim j = 0; j < k; ++j) denom += std::exp(row[j] - m);
            for (Dim j = 0; j < k; ++j) {
              const T p = std::exp(row[j] - m) / denom;
              gz[r * k + j] += g * (p - (j == labels[static_cast<std::size_t>(r)] ? T(1) : T(0)));
            }
          }
        });
      });

  const T* zv = logits.values().data();
  T loss = 0;
  for (Dim r = 0; r < rows; ++r) {
    const T* row = zv + r * k;
    T m = row[0];
    for (Dim j = 1; j < k; ++j) m = std::max(m, row[j]);
    T denom = 0;
    for (Dim j = 0; j < k; ++j) denom += std::exp(row[j] - m);
    loss += m + std::log(denom) - row[labels[static_cast<std::size_t>(r)]];
  }
  out.values_mut()[0] = loss / static_cast<T>(rows);
  return out;
}

/// Mean sigmoid binary cross-entropy against {0,1} targets.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::require_same_shape(logits, targets, "bce_with_logits");
  const Dim n = logits.numel();
  if (n == 0) throw ValueError("bce_with_logits: empty input");

  auto out = detail::make_op_result<T>(
      {}, {logits.impl(), targets.impl()},
      [li = logits.impl(), ti = targets.impl(), n](detail::TensorImpl<T>& o) {
        const T g = o.grad[0] / static_cast<T>(n);
        const T* zv = li->value.data();
        const T* yv = ti->value.data();
        detail::grad_into<T>(li, [&](T* gz) {
          for (Dim i = 0; i < n; ++i) gz[i] += g * (detail::sigmoid(zv[i]) - yv[i]);
        });
      });

  const T* zv = logits.values().data();
  const T* yv = targets.values().data();
  T loss = 0;
  for (Dim i = 0; i < n; ++i) {
    const T z = zv[i];
    loss += std::max(z, T(0)) - z * yv[i] + std::log1p(std::exp(-std::abs(z)));
  }
  out.values_mut()[0] = loss / static_cast<T>(n);
  return out;
}

}  // namespace bissm
