#pragma once

#include <cblas.h>

#include <cmath>
#include <string>
#include <vector>

#include "pmap/rng.hpp"
#include "pmap/tensor.hpp"

namespace pmap {

// One thread keeps every reduction order fixed, which the byte-identical
// rerun guarantee depends on.
inline void ensure_single_thread_blas() {
  static const bool done = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}

namespace detail {
inline void gemm_raw(bool ta, bool tb, blasint m, blasint n, blasint k, float alpha,
                     const float* a, blasint lda, const float* b, blasint ldb, float beta,
                     float* c, blasint ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m,
              n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
inline void gemm_raw(bool ta, bool tb, blasint m, blasint n, blasint k, double alpha,
                     const double* a, blasint lda, const double* b, blasint ldb, double beta,
                     double* c, blasint ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m,
              n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
}  // namespace detail

// C = alpha * op(A) op(B) + beta * C for rank-2 tensors.
template <typename T>
inline void gemm(const Tensor<T>& a, bool ta, const Tensor<T>& b, bool tb, Tensor<T>& c,
                 T alpha = T(1), T beta = T(0)) {
  ensure_single_thread_blas();
  if (a.rank() != 2 || b.rank() != 2 || c.rank() != 2)
    throw ShapeError("gemm: rank-2 tensors required");
  int64_t m = ta ? a.extent(1) : a.extent(0);
  int64_t ka = ta ? a.extent(0) : a.extent(1);
  int64_t kb = tb ? b.extent(1) : b.extent(0);
  int64_t n = tb ? b.extent(0) : b.extent(1);
  if (ka != kb || c.extent(0) != m || c.extent(1) != n)
    throw ShapeError("gemm: shape mismatch " + shape_str(a.shape()) + (ta ? "^T" : "") + " * " +
                     shape_str(b.shape()) + (tb ? "^T" : "") + " -> " + shape_str(c.shape()));
  detail::gemm_raw(ta, tb, static_cast<blasint>(m), static_cast<blasint>(n),
                   static_cast<blasint>(ka), alpha, a.data(),
                   static_cast<blasint>(a.extent(1)), b.data(),
                   static_cast<blasint>(b.extent(1)), beta, c.data(),
                   static_cast<blasint>(c.extent(1)));
}

// Raw strided variant for submatrix views (e.g. per-head slices).
template <typename T>
inline void gemm_strided(bool ta, bool tb, int64_t m, int64_t n, int64_t k, T alpha,
                         const T* a, int64_t lda, const T* b, int64_t ldb, T beta, T* c,
                         int64_t ldc) {
  ensure_single_thread_blas();
  detail::gemm_raw(ta, tb, static_cast<blasint>(m), static_cast<blasint>(n),
                   static_cast<blasint>(k), alpha, a, static_cast<blasint>(lda), b,
                   static_cast<blasint>(ldb), beta, c, static_cast<blasint>(ldc));
}

template <typename T>
inline Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta = false,
                        bool tb = false) {
  int64_t m = ta ? a.extent(1) : a.extent(0);
  int64_t n = tb ? b.extent(0) : b.extent(1);
  Tensor<T> c({m, n});
  gemm(a, ta, b, tb, c);
  return c;
}

// --- Parameters -----------------------------------------------------------

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor<T>(value.shape());
  }
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

template <typename T>
inline void zero_grads(const ParamRefs<T>& params) {
  for (auto* p : params) p->grad.fill(T(0));
}

template <typename T>
inline int64_t param_count(const ParamRefs<T>& params) {
  int64_t n = 0;
  for (auto* p : params) n += p->value.numel();
  return n;
}

// Xavier-uniform init; draws in double so float and double instances of a
// model seeded alike hold the same values.
template <typename T>
inline Tensor<T> xavier_uniform(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

// --- Elementwise helpers --------------------------------------------------

template <typename T>
inline void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
  for (int64_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

template <typename T>
inline Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0) || a.extent(1) != b.extent(1))
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int64_t cells = a.extent(0) * a.extent(1);
  int64_t ca = a.extent(2), cb = b.extent(2);
  Tensor<T> out({a.extent(0), a.extent(1), ca + cb});
  for (int64_t i = 0; i < cells; ++i) {
    for (int64_t k = 0; k < ca; ++k) out[i * (ca + cb) + k] = a[i * ca + k];
    for (int64_t k = 0; k < cb; ++k) out[i * (ca + cb) + ca + k] = b[i * cb + k];
  }
  return out;
}

template <typename T>
inline void split_channels(const Tensor<T>& d, int64_t ca, Tensor<T>& da, Tensor<T>& db) {
  int64_t cells = d.extent(0) * d.extent(1);
  int64_t c = d.extent(2), cb = c - ca;
  da = Tensor<T>({d.extent(0), d.extent(1), ca});
  db = Tensor<T>({d.extent(0), d.extent(1), cb});
  for (int64_t i = 0; i < cells; ++i) {
    for (int64_t k = 0; k < ca; ++k) da[i * ca + k] = d[i * c + k];
    for (int64_t k = 0; k < cb; ++k) db[i * cb + k] = d[i * c + ca + k];
  }
}

// --- im2col / col2im ------------------------------------------------------
// Feature maps are H x W x C. Patch columns are laid out (ky, kx, ci).

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  int64_t out = (in + 2 * pad - k) / stride + 1;
  if (out < 1) throw ShapeError("conv: output extent < 1");
  return out;
}

template <typename T>
inline void im2col(const Tensor<T>& x, int64_t k, int64_t stride, int64_t pad,
                   Tensor<T>& cols) {
  int64_t h = x.extent(0), w = x.extent(1), ci = x.extent(2);
  int64_t ho = conv_out_extent(h, k, stride, pad);
  int64_t wo = conv_out_extent(w, k, stride, pad);
  int64_t patch = k * k * ci;
  if (cols.shape() != Shape({ho * wo, patch})) cols = Tensor<T>({ho * wo, patch});
  T* dst = cols.data();
  const T* src = x.data();
  for (int64_t oy = 0; oy < ho; ++oy) {
    for (int64_t ox = 0; ox < wo; ++ox) {
      T* row = dst + (oy * wo + ox) * patch;
      for (int64_t ky = 0; ky < k; ++ky) {
        int64_t iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) {
          std::fill(row + ky * k * ci, row + (ky + 1) * k * ci, T(0));
          continue;
        }
        for (int64_t kx = 0; kx < k; ++kx) {
          int64_t ix = ox * stride + kx - pad;
          T* cell = row + (ky * k + kx) * ci;
          if (ix < 0 || ix >= w) {
            std::fill(cell, cell + ci, T(0));
          } else {
            const T* s = src + (iy * w + ix) * ci;
            std::copy(s, s + ci, cell);
          }
        }
      }
    }
  }
}

template <typename T>
inline void col2im(const Tensor<T>& cols, int64_t h, int64_t w, int64_t ci, int64_t k,
                   int64_t stride, int64_t pad, Tensor<T>& dx) {
  int64_t ho = conv_out_extent(h, k, stride, pad);
  int64_t wo = conv_out_extent(w, k, stride, pad);
  int64_t patch = k * k * ci;
  dx = Tensor<T>({h, w, ci});
  const T* src = cols.data();
  T* dst = dx.data();
  for (int64_t oy = 0; oy < ho; ++oy) {
    for (int64_t ox = 0; ox < wo; ++ox) {
      const T* row = src + (oy * wo + ox) * patch;
      for (int64_t ky = 0; ky < k; ++ky) {
        int64_t iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int64_t kx = 0; kx < k; ++kx) {
          int64_t ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= w) continue;
          const T* cell = row + (ky * k + kx) * ci;
          T* d = dst + (iy * w + ix) * ci;
          for (int64_t c = 0; c < ci; ++c) d[c] += cell[c];
        }
      }
    }
  }
}

// --- Layers ---------------------------------------------------------------
// Layers cache what their backward pass needs; backward accumulates into
// parameter grads and returns the input gradient.

template <typename T>
struct Linear {
  Param<T> w;  // [in, out]
  Param<T> b;  // [out]
  bool has_bias = true;
  Tensor<T> x_cache;

  Linear() = default;
  Linear(const std::string& name, int64_t in, int64_t out, bool bias, Rng& rng)
      : w(name + ".w", xavier_uniform<T>({in, out}, in, out, rng)), has_bias(bias) {
    if (bias) b = Param<T>(name + ".b", Tensor<T>({out}));
  }

  Tensor<T> forward(const Tensor<T>& x) {
    x_cache = x;
    Tensor<T> y = matmul(x, w.value);
    if (has_bias) {
      int64_t n = y.extent(0), c = y.extent(1);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) y[i * c + j] += b.value[j];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    gemm(x_cache, true, dy, false, w.grad, T(1), T(1));
    if (has_bias) {
      int64_t n = dy.extent(0), c = dy.extent(1);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) b.grad[j] += dy[i * c + j];
    }
    return matmul(dy, w.value, false, true);
  }

  void params(ParamRefs<T>& out) {
    out.push_back(&w);
    if (has_bias) out.push_back(&b);
  }
};

template <typename T>
struct Conv2d {
  int64_t k = 3, cin = 0, cout = 0, stride = 1, pad = 1;
  Param<T> w;  // [k*k*cin, cout]
  Param<T> b;  // [cout]
  Tensor<T> cols_cache;
  Tensor<T> dcols_;  // backward scratch, reused across steps
  int64_t h_in = 0, w_in = 0;

  Conv2d() = default;
  Conv2d(const std::string& name, int64_t k_, int64_t cin_, int64_t cout_, int64_t stride_,
         int64_t pad_, Rng& rng)
      : k(k_), cin(cin_), cout(cout_), stride(stride_), pad(pad_),
        w(name + ".w", xavier_uniform<T>({k_ * k_ * cin_, cout_}, k_ * k_ * cin_,
                                         k_ * k_ * cout_, rng)),
        b(name + ".b", Tensor<T>({cout_})) {}

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.rank() != 3 || x.extent(2) != cin)
      throw ShapeError("conv: input " + shape_str(x.shape()) + " wants cin=" +
                       std::to_string(cin));
    h_in = x.extent(0);
    w_in = x.extent(1);
    im2col(x, k, stride, pad, cols_cache);
    int64_t ho = conv_out_extent(h_in, k, stride, pad);
    int64_t wo = conv_out_extent(w_in, k, stride, pad);
    Tensor<T> y({ho * wo, cout});
    gemm(cols_cache, false, w.value, false, y);
    for (int64_t i = 0; i < ho * wo; ++i)
      for (int64_t j = 0; j < cout; ++j) y[i * cout + j] += b.value[j];
    y.reshape({ho, wo, cout});
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy3) {
    int64_t ho = dy3.extent(0), wo = dy3.extent(1);
    int64_t rows = ho * wo, patch = k * k * cin;
    const T* dy = dy3.data();
    gemm_strided(true, false, patch, cout, rows, T(1), cols_cache.data(), patch, dy, cout,
                 T(1), w.grad.data(), cout);
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < cout; ++j) b.grad[j] += dy[i * cout + j];
    if (dcols_.shape() != Shape({rows, patch})) dcols_ = Tensor<T>({rows, patch});
    gemm_strided(false, true, rows, patch, cout, T(1), dy, cout, w.value.data(), cout, T(0),
                 dcols_.data(), patch);
    Tensor<T> dx;
    col2im(dcols_, h_in, w_in, cin, k, stride, pad, dx);
    return dx;
  }

  void params(ParamRefs<T>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <typename T>
struct LayerNorm {
  Param<T> g, b;  // [C]
  T eps = static_cast<T>(1e-5);
  Tensor<T> xhat_cache;        // [n, C]
  std::vector<T> rstd_cache;   // [n]

  LayerNorm() = default;
  LayerNorm(const std::string& name, int64_t c)
      : g(name + ".g", Tensor<T>::full({c}, T(1))), b(name + ".b", Tensor<T>({c})) {}

  Tensor<T> forward(const Tensor<T>& x) {
    int64_t n = x.extent(0), c = x.extent(1);
    Tensor<T> y({n, c});
    xhat_cache = Tensor<T>({n, c});
    rstd_cache.assign(static_cast<size_t>(n), T(0));
    for (int64_t i = 0; i < n; ++i) {
      T mean = 0;
      for (int64_t j = 0; j < c; ++j) mean += x[i * c + j];
      mean /= static_cast<T>(c);
      T var = 0;
      for (int64_t j = 0; j < c; ++j) {
        T d = x[i * c + j] - mean;
        var += d * d;
      }
      var /= static_cast<T>(c);
      T rstd = T(1) / std::sqrt(var + eps);
      rstd_cache[static_cast<size_t>(i)] = rstd;
      for (int64_t j = 0; j < c; ++j) {
        T xh = (x[i * c + j] - mean) * rstd;
        xhat_cache[i * c + j] = xh;
        y[i * c + j] = xh * g.value[j] + b.value[j];
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    int64_t n = dy.extent(0), c = dy.extent(1);
    Tensor<T> dx({n, c});
    for (int64_t i = 0; i < n; ++i) {
      T sum_dyg = 0, sum_dyg_xhat = 0;
      for (int64_t j = 0; j < c; ++j) {
        T dyg = dy[i * c + j] * g.value[j];
        T xh = xhat_cache[i * c + j];
        sum_dyg += dyg;
        sum_dyg_xhat += dyg * xh;
        g.grad[j] += dy[i * c + j] * xh;
        b.grad[j] += dy[i * c + j];
      }
      T inv_c = T(1) / static_cast<T>(c);
      T rstd = rstd_cache[static_cast<size_t>(i)];
      for (int64_t j = 0; j < c; ++j) {
        T dyg = dy[i * c + j] * g.value[j];
        T xh = xhat_cache[i * c + j];
        dx[i * c + j] = rstd * (dyg - inv_c * sum_dyg - xh * inv_c * sum_dyg_xhat);
      }
    }
    return dx;
  }

  void params(ParamRefs<T>& out) {
    out.push_back(&g);
    out.push_back(&b);
  }
};

// Raw row-wise softmax; y may alias x.
template <typename T>
inline void softmax_rows_raw(const T* x, T* y, int64_t n, int64_t c) {
  for (int64_t i = 0; i < n; ++i) {
    const T* xr = x + i * c;
    T* yr = y + i * c;
    T mx = xr[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    T sum = 0;
    for (int64_t j = 0; j < c; ++j) {
      T e = std::exp(xr[j] - mx);
      yr[j] = e;
      sum += e;
    }
    for (int64_t j = 0; j < c; ++j) yr[j] /= sum;
  }
}

// Row-wise softmax with a cached output.
template <typename T>
inline Tensor<T> softmax_rows(const Tensor<T>& x) {
  int64_t n = x.extent(0), c = x.extent(1);
  Tensor<T> y({n, c});
  softmax_rows_raw(x.data(), y.data(), n, c);
  return y;
}

// Raw dx for y = softmax(x) rows given dy and y; dx may alias dy.
template <typename T>
inline void softmax_rows_backward_raw(const T* y, const T* dy, T* dx, int64_t n, int64_t c) {
  for (int64_t i = 0; i < n; ++i) {
    const T* yr = y + i * c;
    const T* dyr = dy + i * c;
    T* dxr = dx + i * c;
    T dot = 0;
    for (int64_t j = 0; j < c; ++j) dot += dyr[j] * yr[j];
    for (int64_t j = 0; j < c; ++j) dxr[j] = yr[j] * (dyr[j] - dot);
  }
}

// dx for y = softmax_rows(x) given dy and y.
template <typename T>
inline Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  int64_t n = y.extent(0), c = y.extent(1);
  Tensor<T> dx({n, c});
  softmax_rows_backward_raw(y.data(), dy.data(), dx.data(), n, c);
  return dx;
}

template <typename T>
struct Gelu {
  Tensor<T> x_cache;

  Tensor<T> forward(const Tensor<T>& x) {
    x_cache = x;
    Tensor<T> y(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
      double v = static_cast<double>(x[i]);
      y[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))));
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(dy.shape());
    for (int64_t i = 0; i < dy.numel(); ++i) {
      double v = static_cast<double>(x_cache[i]);
      double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
      double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * kPi);
      dx[i] = dy[i] * static_cast<T>(cdf + v * pdf);
    }
    return dx;
  }
};

// Inverted dropout. The mask is sampled explicitly once per step so a loss
// can be re-evaluated under the same noise (finite differencing needs that).
template <typename T>
struct Dropout {
  double p = 0.0;
  Tensor<T> mask;

  void sample(const Shape& shape, Rng& rng) {
    mask = Tensor<T>(shape);
    if (p <= 0.0) {
      mask.fill(T(1));
      return;
    }
    T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (int64_t i = 0; i < mask.numel(); ++i)
      mask[i] = rng.uniform() < p ? T(0) : keep_scale;
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    if (!train || p <= 0.0) return x;
    if (!mask.same_shape(x)) throw ShapeError("dropout: mask not sampled for this shape");
    Tensor<T> y(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] * mask[i];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool train) {
    if (!train || p <= 0.0) return dy;
    Tensor<T> dx(dy.shape());
    for (int64_t i = 0; i < dy.numel(); ++i) dx[i] = dy[i] * mask[i];
    return dx;
  }
};

// --- Resampling -----------------------------------------------------------

template <typename T>
inline Tensor<T> upsample2x_nearest(const Tensor<T>& x) {
  int64_t h = x.extent(0), w = x.extent(1), c = x.extent(2);
  Tensor<T> y({2 * h, 2 * w, c});
  for (int64_t r = 0; r < 2 * h; ++r)
    for (int64_t col = 0; col < 2 * w; ++col) {
      const T* s = x.data() + ((r / 2) * w + col / 2) * c;
      T* d = y.data() + (r * 2 * w + col) * c;
      std::copy(s, s + c, d);
    }
  return y;
}

template <typename T>
inline Tensor<T> upsample2x_nearest_backward(const Tensor<T>& dy) {
  int64_t h2 = dy.extent(0), w2 = dy.extent(1), c = dy.extent(2);
  Tensor<T> dx({h2 / 2, w2 / 2, c});
  for (int64_t r = 0; r < h2; ++r)
    for (int64_t col = 0; col < w2; ++col) {
      const T* s = dy.data() + (r * w2 + col) * c;
      T* d = dx.data() + ((r / 2) * (w2 / 2) + col / 2) * c;
      for (int64_t k = 0; k < c; ++k) d[k] += s[k];
    }
  return dx;
}

// --- Positional encoding --------------------------------------------------
// First half of the channels encodes the row index, second half the column,
// each as interleaved (sin, cos) pairs over a geometric frequency ladder.
template <typename T>
inline Tensor<T> sine_positional_embedding(int64_t h, int64_t w, int64_t c) {
  if (c % 4 != 0) throw InvalidArgument("positional embedding: channels must be divisible by 4");
  Tensor<T> pe({h, w, c});
  int64_t half = c / 2;
  int64_t pairs = half / 2;
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t col = 0; col < w; ++col) {
      T* cell = pe.data() + (r * w + col) * c;
      for (int64_t i = 0; i < pairs; ++i) {
        double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                            static_cast<double>(half));
        cell[2 * i] = static_cast<T>(std::sin(r * freq));
        cell[2 * i + 1] = static_cast<T>(std::cos(r * freq));
        cell[half + 2 * i] = static_cast<T>(std::sin(col * freq));
        cell[half + 2 * i + 1] = static_cast<T>(std::cos(col * freq));
      }
    }
  }
  return pe;
}

}  // namespace pmap
