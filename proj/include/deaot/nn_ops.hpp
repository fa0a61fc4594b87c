#pragma once

// Neural primitives used by the propagation layers: scaled correlation
// (dense and windowed, single- or multi-head), value aggregation, SiLU,
// depth-wise and dense 2-D convolution, layer norm and the gated
// propagation function.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "deaot/tensor.hpp"

namespace deaot {

// Spatial layout of a token matrix: row index = y * w + x.
struct Grid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t tokens() const { return h * w; }
  bool operator==(const Grid&) const = default;
};

// Square window of side `size` centred on each query location of a grid.
struct LocalWindow {
  Grid grid;
  std::size_t size = 1;
  std::size_t area() const { return size * size; }
};

// Attention map. Dense maps store weights as [n x m] (one head) or
// [heads x n x m]; windowed maps as [heads x n x size^2] where entries that
// fall outside the key frame hold exactly zero weight.
template <typename T>
struct CorrMap {
  Tensor<T> weights;
  std::size_t heads = 1;
  std::size_t queries = 0;
  std::size_t keys = 0;  // dense: key tokens; windowed: window area
  std::optional<LocalWindow> window;
  std::int64_t query_frame = -1;
  std::vector<std::int64_t> key_frames;

  bool is_local() const { return window.has_value(); }
  // Weight row for (head, query); length `keys`.
  std::span<const T> row(std::size_t head, std::size_t query) const {
    return weights.data().subspan((head * queries + query) * keys, keys);
  }
};

namespace detail {

// Copies columns [begin, begin + count) of a row-major [rows x cols] buffer.
template <typename T>
std::vector<T> pack_cols(const T* src, std::size_t rows, std::size_t cols, std::size_t begin,
                         std::size_t count) {
  std::vector<T> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(src + r * cols + begin, count, out.data() + r * count);
  return out;
}

template <typename T>
void unpack_cols_add(const std::vector<T>& src, T* dst, std::size_t rows, std::size_t cols,
                     std::size_t begin, std::size_t count) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) dst[r * cols + begin + c] += src[r * count + c];
}

inline void check_heads(std::size_t channels, std::size_t heads, const char* what) {
  if (heads == 0 || channels % heads != 0)
    throw ConfigError(std::string(what) + ": " + std::to_string(heads) + " heads do not divide " +
                      std::to_string(channels) + " channels");
}

// Softmax backward for one row: dx = y * (dy - <y, dy>), scaled.
template <typename T>
void softmax_row_backward(const T* y, const T* dy, T* dx, std::size_t m, T factor) {
  T dot = T(0);
  for (std::size_t j = 0; j < m; ++j) dot += y[j] * dy[j];
  for (std::size_t j = 0; j < m; ++j) dx[j] = factor * y[j] * (dy[j] - dot);
}

}  // namespace detail

// weights = softmax(q k^T / sqrt(d)) per head, d = channels per head.
template <typename T>
CorrMap<T> corr(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads = 1) {
  if (q.ndim() != 2 || k.ndim() != 2 || q.dim(1) != k.dim(1))
    throw DimensionError("corr: query " + shape_str(q.shape()) + " vs key " + shape_str(k.shape()));
  const std::size_t n = q.dim(0), m = k.dim(0), ck = q.dim(1);
  detail::check_heads(ck, heads, "corr");
  const std::size_t d = ck / heads;
  const T factor = T(1) / std::sqrt(static_cast<T>(d));
  std::vector<T> out(heads * n * m, T(0));
  for (std::size_t h = 0; h < heads; ++h) {
    T* w = out.data() + h * n * m;
    if (heads == 1) {
      detail::gemm(n, d, m, q.data().data(), false, k.data().data(), true, w);
    } else {
      auto qh = detail::pack_cols(q.data().data(), n, ck, h * d, d);
      auto kh = detail::pack_cols(k.data().data(), m, ck, h * d, d);
      detail::gemm(n, d, m, qh.data(), false, kh.data(), true, w);
    }
    for (std::size_t i = 0; i < n; ++i) {
      T* row = w + i * m;
      T top = row[0];
      for (std::size_t j = 1; j < m; ++j) top = std::max(top, row[j]);
      T total = T(0);
      for (std::size_t j = 0; j < m; ++j) {
        row[j] = std::exp(factor * (row[j] - top));
        total += row[j];
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < m; ++j) row[j] *= inv;
    }
  }
  Shape shape = heads == 1 ? Shape{n, m} : Shape{heads, n, m};
  auto nq = q.node(), nk = k.node();
  auto weights = detail::make_result<T>(
      std::move(shape), std::move(out), {&q, &k},
      [nq, nk, n, m, ck, d, heads, factor](detail::Node<T>& self) {
        std::vector<T> dlogit(n * m);
        for (std::size_t h = 0; h < heads; ++h) {
          const T* y = self.data.data() + h * n * m;
          const T* dy = self.grad.data() + h * n * m;
          for (std::size_t i = 0; i < n; ++i)
            detail::softmax_row_backward(y + i * m, dy + i * m, dlogit.data() + i * m, m, factor);
          if (nq->requires_grad) {
            std::vector<T> dq(n * d, T(0));
            auto kh = detail::pack_cols(nk->data.data(), m, ck, h * d, d);
            detail::gemm(n, m, d, dlogit.data(), false, kh.data(), false, dq.data());
            detail::unpack_cols_add(dq, nq->ensure_grad().data(), n, ck, h * d, d);
          }
          if (nk->requires_grad) {
            std::vector<T> dk(m * d, T(0));
            auto qh = detail::pack_cols(nq->data.data(), n, ck, h * d, d);
            detail::gemm(m, n, d, dlogit.data(), true, qh.data(), false, dk.data());
            detail::unpack_cols_add(dk, nk->ensure_grad().data(), m, ck, h * d, d);
          }
        }
      });
  CorrMap<T> map;
  map.weights = std::move(weights);
  map.heads = heads;
  map.queries = n;
  map.keys = m;
  return map;
}

// Windowed correlation: query p attends to the size x size neighbourhood of
// p in the key frame (same grid). Out-of-frame keys are excluded from the
// softmax and carry zero weight.
template <typename T>
CorrMap<T> corr_local(const Tensor<T>& q, const Tensor<T>& k, Grid grid, std::size_t size,
                      std::size_t heads = 1) {
  if (size % 2 == 0) throw ConfigError("window size must be odd, got " + std::to_string(size));
  if (q.ndim() != 2 || k.ndim() != 2 || q.dim(1) != k.dim(1) || q.dim(0) != grid.tokens() ||
      k.dim(0) != grid.tokens())
    throw DimensionError("corr_local: query " + shape_str(q.shape()) + ", key " + shape_str(k.shape()) +
                         " on grid " + std::to_string(grid.h) + "x" + std::to_string(grid.w));
  const std::size_t n = grid.tokens(), ck = q.dim(1), area = size * size;
  detail::check_heads(ck, heads, "corr_local");
  const std::size_t d = ck / heads;
  const auto radius = static_cast<std::ptrdiff_t>(size / 2);
  const T factor = T(1) / std::sqrt(static_cast<T>(d));
  // key token for (query, window slot), or -1 when out of frame
  std::vector<std::ptrdiff_t> key_of(n * area, -1);
  for (std::size_t y = 0; y < grid.h; ++y)
    for (std::size_t x = 0; x < grid.w; ++x)
      for (std::size_t wy = 0; wy < size; ++wy)
        for (std::size_t wx = 0; wx < size; ++wx) {
          const auto ky = static_cast<std::ptrdiff_t>(y + wy) - radius;
          const auto kx = static_cast<std::ptrdiff_t>(x + wx) - radius;
          if (ky < 0 || kx < 0 || ky >= static_cast<std::ptrdiff_t>(grid.h) ||
              kx >= static_cast<std::ptrdiff_t>(grid.w))
            continue;
          key_of[(y * grid.w + x) * area + wy * size + wx] = ky * static_cast<std::ptrdiff_t>(grid.w) + kx;
        }
  std::vector<T> out(heads * n * area, T(0));
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t p = 0; p < n; ++p) {
      T* row = out.data() + (h * n + p) * area;
      const T* qp = qd + p * ck + h * d;
      T top = -std::numeric_limits<T>::infinity();
      for (std::size_t s = 0; s < area; ++s) {
        const auto key = key_of[p * area + s];
        if (key < 0) continue;
        const T* kp = kd + static_cast<std::size_t>(key) * ck + h * d;
        T acc = T(0);
        for (std::size_t c = 0; c < d; ++c) acc += qp[c] * kp[c];
        row[s] = acc;
        top = std::max(top, acc);
      }
      T total = T(0);
      for (std::size_t s = 0; s < area; ++s) {
        if (key_of[p * area + s] < 0) continue;
        row[s] = std::exp(factor * (row[s] - top));
        total += row[s];
      }
      const T inv = T(1) / total;
      for (std::size_t s = 0; s < area; ++s) row[s] *= inv;
    }
  auto nq = q.node(), nk = k.node();
  auto weights = detail::make_result<T>(
      {heads, n, area}, std::move(out), {&q, &k},
      [nq, nk, key_of, n, area, ck, d, heads, factor](detail::Node<T>& self) {
        std::vector<T> dlogit(area);
        T* dq = nq->requires_grad ? nq->ensure_grad().data() : nullptr;
        T* dk = nk->requires_grad ? nk->ensure_grad().data() : nullptr;
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t p = 0; p < n; ++p) {
            const std::size_t base = (h * n + p) * area;
            detail::softmax_row_backward(self.data.data() + base, self.grad.data() + base, dlogit.data(),
                                         area, factor);
            for (std::size_t s = 0; s < area; ++s) {
              const auto key = key_of[p * area + s];
              if (key < 0) continue;
              const auto kk = static_cast<std::size_t>(key);
              const T g = dlogit[s];
              if (dq)
                for (std::size_t c = 0; c < d; ++c) dq[p * ck + h * d + c] += g * nk->data[kk * ck + h * d + c];
              if (dk)
                for (std::size_t c = 0; c < d; ++c) dk[kk * ck + h * d + c] += g * nq->data[p * ck + h * d + c];
            }
          }
      });
  CorrMap<T> map;
  map.weights = std::move(weights);
  map.heads = heads;
  map.queries = n;
  map.keys = area;
  map.window = LocalWindow{grid, size};
  return map;
}

// Aggregates values with an attention map: out = Corr * V, with the value
// channels split evenly across heads.
template <typename T>
Tensor<T> attend(const CorrMap<T>& map, const Tensor<T>& v) {
  if (v.ndim() != 2) throw DimensionError("attend: values must be a matrix");
  const std::size_t heads = map.heads, n = map.queries, cv = v.dim(1);
  detail::check_heads(cv, heads, "attend");
  const std::size_t dv = cv / heads;
  const auto& w = map.weights;
  auto nw = w.node(), nv = v.node();
  if (!map.is_local()) {
    const std::size_t m = map.keys;
    if (v.dim(0) != m)
      throw DimensionError("attend: map has " + std::to_string(m) + " keys, values have " +
                           std::to_string(v.dim(0)) + " rows");
    std::vector<T> out(n * cv, T(0));
    for (std::size_t h = 0; h < heads; ++h) {
      const T* wh = w.data().data() + h * n * m;
      if (heads == 1) {
        detail::gemm_nn(n, m, cv, wh, v.data().data(), out.data());
      } else {
        auto vh = detail::pack_cols(v.data().data(), m, cv, h * dv, dv);
        std::vector<T> oh(n * dv, T(0));
        detail::gemm_nn(n, m, dv, wh, vh.data(), oh.data());
        detail::unpack_cols_add(oh, out.data(), n, cv, h * dv, dv);
      }
    }
    return detail::make_result<T>(
        {n, cv}, std::move(out), {&w, &v}, [nw, nv, n, m, cv, dv, heads](detail::Node<T>& self) {
          for (std::size_t h = 0; h < heads; ++h) {
            auto gh = heads == 1 ? self.grad : detail::pack_cols(self.grad.data(), n, cv, h * dv, dv);
            auto vh = heads == 1 ? nv->data : detail::pack_cols(nv->data.data(), m, cv, h * dv, dv);
            if (nw->requires_grad)  // dW_h = dO_h V_h^T
              detail::gemm(n, dv, m, gh.data(), false, vh.data(), true, nw->ensure_grad().data() + h * n * m);
            if (nv->requires_grad) {  // dV_h = W_h^T dO_h
              std::vector<T> dvh(m * dv, T(0));
              detail::gemm(m, n, dv, nw->data.data() + h * n * m, true, gh.data(), false, dvh.data());
              detail::unpack_cols_add(dvh, nv->ensure_grad().data(), m, cv, h * dv, dv);
            }
          }
        });
  }
  const auto window = *map.window;
  const std::size_t size = window.size, area = window.area();
  const Grid grid = window.grid;
  if (v.dim(0) != grid.tokens())
    throw DimensionError("attend: windowed map needs values on the same grid");
  const auto radius = static_cast<std::ptrdiff_t>(size / 2);
  std::vector<std::ptrdiff_t> key_of(n * area, -1);
  for (std::size_t y = 0; y < grid.h; ++y)
    for (std::size_t x = 0; x < grid.w; ++x)
      for (std::size_t wy = 0; wy < size; ++wy)
        for (std::size_t wx = 0; wx < size; ++wx) {
          const auto ky = static_cast<std::ptrdiff_t>(y + wy) - radius;
          const auto kx = static_cast<std::ptrdiff_t>(x + wx) - radius;
          if (ky < 0 || kx < 0 || ky >= static_cast<std::ptrdiff_t>(grid.h) ||
              kx >= static_cast<std::ptrdiff_t>(grid.w))
            continue;
          key_of[(y * grid.w + x) * area + wy * size + wx] = ky * static_cast<std::ptrdiff_t>(grid.w) + kx;
        }
  std::vector<T> out(n * cv, T(0));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t p = 0; p < n; ++p) {
      const T* row = w.data().data() + (h * n + p) * area;
      T* op = out.data() + p * cv + h * dv;
      for (std::size_t s = 0; s < area; ++s) {
        const auto key = key_of[p * area + s];
        if (key < 0) continue;
        const T a = row[s];
        const T* vp = v.data().data() + static_cast<std::size_t>(key) * cv + h * dv;
        for (std::size_t c = 0; c < dv; ++c) op[c] += a * vp[c];
      }
    }
  return detail::make_result<T>(
      {n, cv}, std::move(out), {&w, &v}, [nw, nv, key_of, n, area, cv, dv, heads](detail::Node<T>& self) {
        T* dw = nw->requires_grad ? nw->ensure_grad().data() : nullptr;
        T* dvv = nv->requires_grad ? nv->ensure_grad().data() : nullptr;
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t p = 0; p < n; ++p) {
            const std::size_t base = (h * n + p) * area;
            const T* gp = self.grad.data() + p * cv + h * dv;
            for (std::size_t s = 0; s < area; ++s) {
              const auto key = key_of[p * area + s];
              if (key < 0) continue;
              const auto kk = static_cast<std::size_t>(key);
              if (dw) {
                T acc = T(0);
                for (std::size_t c = 0; c < dv; ++c) acc += gp[c] * nv->data[kk * cv + h * dv + c];
                dw[base + s] += acc;
              }
              if (dvv) {
                const T a = nw->data[base + s];
                for (std::size_t c = 0; c < dv; ++c) dvv[kk * cv + h * dv + c] += a * gp[c];
              }
            }
          }
      });
}

// Multi-head scaled dot-product attention (split -> attend -> concat).
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                              std::size_t heads) {
  return attend(corr(q, k, heads), v);
}

// x * logistic(x)
template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (T(1) + std::exp(-x[i]));
  auto nx = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [nx](detail::Node<T>& self) {
    auto& g = nx->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-nx->data[i]));
      g[i] += self.grad[i] * s * (T(1) + nx->data[i] * (T(1) - s));
    }
  });
}

// Per-channel ks x ks convolution with zero padding (same output size) and
// no bias. `x` holds grid.tokens() rows of C channels; kernel is [ks, ks, C].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, Grid grid) {
  if (kernel.ndim() != 3 || kernel.dim(0) != kernel.dim(1))
    throw DimensionError("depthwise kernel must be [ks, ks, C], got " + shape_str(kernel.shape()));
  const std::size_t ks = kernel.dim(0), c = kernel.dim(2);
  if (ks % 2 == 0) throw ConfigError("depthwise kernel size must be odd, got " + std::to_string(ks));
  if (x.numel() != grid.tokens() * c)
    throw DimensionError("depthwise input " + shape_str(x.shape()) + " does not fit grid " +
                         std::to_string(grid.h) + "x" + std::to_string(grid.w) + "x" + std::to_string(c));
  const auto r = static_cast<std::ptrdiff_t>(ks / 2);
  const auto H = static_cast<std::ptrdiff_t>(grid.h), W = static_cast<std::ptrdiff_t>(grid.w);
  std::vector<T> out(x.numel(), T(0));
  const T* xd = x.data().data();
  const T* kd = kernel.data().data();
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
      T* o = out.data() + (y * W + xx) * c;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
        const auto sy = y + dy;
        if (sy < 0 || sy >= H) continue;
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const auto sx = xx + dx;
          if (sx < 0 || sx >= W) continue;
          const T* in = xd + (sy * W + sx) * c;
          const T* kw = kd + ((dy + r) * static_cast<std::ptrdiff_t>(ks) + (dx + r)) * c;
          for (std::size_t ch = 0; ch < c; ++ch) o[ch] += in[ch] * kw[ch];
        }
      }
    }
  auto nx = x.node(), nk = kernel.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &kernel}, [nx, nk, ks, c, r, H, W](detail::Node<T>& self) {
        T* gx = nx->requires_grad ? nx->ensure_grad().data() : nullptr;
        T* gk = nk->requires_grad ? nk->ensure_grad().data() : nullptr;
        for (std::ptrdiff_t y = 0; y < H; ++y)
          for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
            const T* go = self.grad.data() + (y * W + xx) * c;
            for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
              const auto sy = y + dy;
              if (sy < 0 || sy >= H) continue;
              for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
                const auto sx = xx + dx;
                if (sx < 0 || sx >= W) continue;
                const std::size_t in_off = static_cast<std::size_t>((sy * W + sx)) * c;
                const std::size_t k_off = static_cast<std::size_t>((dy + r) * static_cast<std::ptrdiff_t>(ks) + (dx + r)) * c;
                for (std::size_t ch = 0; ch < c; ++ch) {
                  if (gx) gx[in_off + ch] += go[ch] * nk->data[k_off + ch];
                  if (gk) gk[k_off + ch] += go[ch] * nx->data[in_off + ch];
                }
              }
            }
          }
      });
}

// Dense ks x ks convolution, zero padding (ks-1)/2, no bias. Weight shape
// [ks, ks, Cin, Cout]. With stride s the output grid is (h/s, w/s) sampled at
// positions (s*y, s*x).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, Grid grid, std::size_t stride = 1) {
  if (weight.ndim() != 4 || weight.dim(0) != weight.dim(1))
    throw DimensionError("conv2d weight must be [ks, ks, Cin, Cout], got " + shape_str(weight.shape()));
  const std::size_t ks = weight.dim(0), cin = weight.dim(2), cout = weight.dim(3);
  if (ks % 2 == 0) throw ConfigError("conv2d kernel size must be odd");
  if (stride == 0 || grid.h % stride != 0 || grid.w % stride != 0)
    throw DimensionError("conv2d: grid not divisible by stride " + std::to_string(stride));
  if (x.numel() != grid.tokens() * cin) throw DimensionError("conv2d input does not fit grid/channels");
  const Grid og{grid.h / stride, grid.w / stride};
  const std::size_t n = og.tokens(), patch = ks * ks * cin;
  const auto r = static_cast<std::ptrdiff_t>(ks / 2);
  // im2col
  std::vector<T> cols(n * patch, T(0));
  for (std::size_t oy = 0; oy < og.h; ++oy)
    for (std::size_t ox = 0; ox < og.w; ++ox) {
      T* dst = cols.data() + (oy * og.w + ox) * patch;
      for (std::size_t ky = 0; ky < ks; ++ky) {
        const auto sy = static_cast<std::ptrdiff_t>(oy * stride + ky) - r;
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(grid.h)) continue;
        for (std::size_t kx = 0; kx < ks; ++kx) {
          const auto sx = static_cast<std::ptrdiff_t>(ox * stride + kx) - r;
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(grid.w)) continue;
          std::copy_n(x.data().data() + (static_cast<std::size_t>(sy) * grid.w + static_cast<std::size_t>(sx)) * cin,
                      cin, dst + (ky * ks + kx) * cin);
        }
      }
    }
  std::vector<T> out(n * cout, T(0));
  detail::gemm_nn(n, patch, cout, cols.data(), weight.data().data(), out.data());
  auto nx = x.node(), nw = weight.node();
  return detail::make_result<T>(
      {n, cout}, std::move(out), {&x, &weight},
      [nx, nw, cols = std::move(cols), grid, og, ks, cin, cout, stride, r, n, patch](detail::Node<T>& self) {
        if (nw->requires_grad)
          detail::gemm(patch, n, cout, cols.data(), true, self.grad.data(), false, nw->ensure_grad().data());
        if (nx->requires_grad) {
          std::vector<T> dcols(n * patch, T(0));
          detail::gemm(n, cout, patch, self.grad.data(), false, nw->data.data(), true, dcols.data());
          auto& gx = nx->ensure_grad();
          for (std::size_t oy = 0; oy < og.h; ++oy)
            for (std::size_t ox = 0; ox < og.w; ++ox) {
              const T* src = dcols.data() + (oy * og.w + ox) * patch;
              for (std::size_t ky = 0; ky < ks; ++ky) {
                const auto sy = static_cast<std::ptrdiff_t>(oy * stride + ky) - r;
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(grid.h)) continue;
                for (std::size_t kx = 0; kx < ks; ++kx) {
                  const auto sx = static_cast<std::ptrdiff_t>(ox * stride + kx) - r;
                  if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(grid.w)) continue;
                  T* dst = gx.data() + (static_cast<std::size_t>(sy) * grid.w + static_cast<std::size_t>(sx)) * cin;
                  const T* s = src + (ky * ks + kx) * cin;
                  for (std::size_t ch = 0; ch < cin; ++ch) dst[ch] += s[ch];
                }
              }
            }
        }
      });
}

// Nearest-neighbour upsampling of a token grid by an integer factor.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, Grid grid, std::size_t factor) {
  if (x.ndim() != 2 || x.dim(0) != grid.tokens()) throw DimensionError("upsample_nearest: input does not fit grid");
  if (factor == 1) return x;
  const std::size_t c = x.dim(1), oh = grid.h * factor, ow = grid.w * factor;
  std::vector<T> out(oh * ow * c);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t xx = 0; xx < ow; ++xx)
      std::copy_n(x.data().data() + ((y / factor) * grid.w + xx / factor) * c, c, out.data() + (y * ow + xx) * c);
  auto nx = x.node();
  return detail::make_result<T>({oh * ow, c}, std::move(out), {&x},
                                [nx, grid, factor, c, oh, ow](detail::Node<T>& self) {
                                  auto& g = nx->ensure_grad();
                                  for (std::size_t y = 0; y < oh; ++y)
                                    for (std::size_t xx = 0; xx < ow; ++xx) {
                                      T* dst = g.data() + ((y / factor) * grid.w + xx / factor) * c;
                                      const T* src = self.grad.data() + (y * ow + xx) * c;
                                      for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                                    }
                                });
}

inline constexpr double kLayerNormEps = 1e-5;

// Per row: (x - mean) / sqrt(var + eps) * gain + bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  if (x.ndim() != 2 || gain.numel() != x.dim(1) || bias.numel() != x.dim(1))
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + ", gain " + shape_str(gain.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<T> out(n * c), xhat(n * c), inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.data().data() + i * c;
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    inv_std[i] = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gain[j] + bias[j];
    }
  }
  auto nx = x.node(), ng = gain.node(), nb = bias.node();
  return detail::make_result<T>(
      {n, c}, std::move(out), {&x, &gain, &bias},
      [nx, ng, nb, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c](detail::Node<T>& self) {
        if (ng->requires_grad) {
          auto& g = ng->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j] * xhat[i * c + j];
        }
        if (nb->requires_grad) {
          auto& g = nb->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
        }
        if (nx->requires_grad) {
          auto& g = nx->ensure_grad();
          std::vector<T> dxhat(c);
          for (std::size_t i = 0; i < n; ++i) {
            T mean_d = T(0), mean_dx = T(0);
            for (std::size_t j = 0; j < c; ++j) {
              dxhat[j] = self.grad[i * c + j] * ng->data[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat[i * c + j];
            }
            mean_d /= static_cast<T>(c);
            mean_dx /= static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j)
              g[i * c + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
          }
        }
      });
}

struct GatedPropagationOptions {
  bool gate = true;  // false replaces silu(U) by ones (ablation / cross-checks)
};

// GP(U, Q, K, V) = F_dw(silu(U) * Corr(Q, K) V) W^O. An empty dw kernel
// replaces F_dw by the identity.
template <typename T>
Tensor<T> gated_propagation(const Tensor<T>& u, const CorrMap<T>& map, const Tensor<T>& v,
                            const Tensor<T>& w_out, const Tensor<T>& dw_kernel, Grid grid,
                            GatedPropagationOptions options = {}) {
  if (map.queries != grid.tokens())
    throw DimensionError("gated_propagation: " + std::to_string(map.queries) + " query tokens on a " +
                         std::to_string(grid.h) + "x" + std::to_string(grid.w) + " grid");
  auto aggregated = attend(map, v);
  if (options.gate) {
    if (u.shape() != aggregated.shape())
      throw DimensionError("gated_propagation: gate " + shape_str(u.shape()) + " vs values " +
                           shape_str(aggregated.shape()));
    aggregated = mul(silu(u), aggregated);
  }
  if (!dw_kernel.empty()) aggregated = depthwise_conv2d(aggregated, dw_kernel, grid);
  return matmul(aggregated, w_out);
}

// Sets the listed columns to -inf; they receive no gradient.
template <typename T>
Tensor<T> mask_columns(const Tensor<T>& x, const std::vector<bool>& keep) {
  if (x.ndim() != 2 || keep.size() != x.dim(1)) throw DimensionError("mask_columns: width mismatch");
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      if (!keep[j]) out[i * c + j] = -std::numeric_limits<T>::infinity();
  auto nx = x.node();
  return detail::make_result<T>({n, c}, std::move(out), {&x}, [nx, keep, n, c](detail::Node<T>& self) {
    auto& g = nx->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j)
        if (keep[j]) g[i * c + j] += self.grad[i * c + j];
  });
}

// Mean over rows of -log softmax(logits)[target]. Columns at -inf are
// excluded from the normalizer.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  if (logits.ndim() != 2 || logits.dim(0) != targets.size())
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<T> prob(n * c);
  T loss = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data().data() + i * c;
    if (targets[i] >= c) throw IdentityError("cross_entropy target out of range");
    T top = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) top = std::max(top, row[j]);
    T total = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      prob[i * c + j] = std::isinf(row[j]) && row[j] < 0 ? T(0) : std::exp(row[j] - top);
      total += prob[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] /= total;
    loss -= (row[targets[i]] - top) - std::log(total);
  }
  loss /= static_cast<T>(n);
  auto nl = logits.node();
  return detail::make_result<T>({1}, {loss}, {&logits},
                                [nl, prob = std::move(prob), targets, n, c](detail::Node<T>& self) {
                                  auto& g = nl->ensure_grad();
                                  const T s = self.grad[0] / static_cast<T>(n);
                                  for (std::size_t i = 0; i < n; ++i)
                                    for (std::size_t j = 0; j < c; ++j) {
                                      const T onehot = j == targets[i] ? T(1) : T(0);
                                      g[i * c + j] += s * (prob[i * c + j] - onehot);
                                    }
                                });
}

}  // namespace deaot
