#pragma once

// Naive reference implementations used as test oracles. Everything here
// works on plain std::vector<double> and shares no code with the library.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

// [n x k] * [k x m]
inline Vec matmul(const Vec& a, const Vec& b, std::size_t n, std::size_t k, std::size_t m) {
  Vec c(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * m + j];
      c[i * m + j] = s;
    }
  return c;
}

inline Vec softmax_rows(const Vec& x, std::size_t n, std::size_t m) {
  Vec y(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) top = std::max(top, x[i * m + j]);
    double z = 0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(x[i * m + j] - top);
    for (std::size_t j = 0; j < m; ++j) y[i * m + j] = std::exp(x[i * m + j] - top) / z;
  }
  return y;
}

// Columns [h*d, (h+1)*d) of a [rows x cols] matrix.
inline Vec head_cols(const Vec& x, std::size_t rows, std::size_t cols, std::size_t h, std::size_t d) {
  Vec out(rows * d);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * cols + h * d + j];
  return out;
}

// softmax(q_h k_h^T / sqrt(d_h)) for each head; result [heads x n x m].
inline Vec corr(const Vec& q, const Vec& k, std::size_t n, std::size_t m, std::size_t ck, std::size_t heads) {
  const std::size_t d = ck / heads;
  Vec out;
  for (std::size_t h = 0; h < heads; ++h) {
    Vec logits(n * m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < d; ++p) s += q[i * ck + h * d + p] * k[j * ck + h * d + p];
        logits[i * m + j] = s / std::sqrt(static_cast<double>(d));
      }
    auto w = softmax_rows(logits, n, m);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

// Split into heads, attend, concatenate.
inline Vec multihead_attention(const Vec& q, const Vec& k, const Vec& v, std::size_t n, std::size_t m,
                               std::size_t ck, std::size_t cv, std::size_t heads) {
  const std::size_t dk = ck / heads, dv = cv / heads;
  Vec out(n * cv, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = head_cols(q, n, ck, h, dk), kh = head_cols(k, m, ck, h, dk), vh = head_cols(v, m, cv, h, dv);
    auto w = corr(qh, kh, n, m, dk, 1);
    auto oh = matmul(w, vh, n, m, dv);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dv; ++j) out[i * cv + h * dv + j] = oh[i * dv + j];
  }
  return out;
}

// Windowed attention written as dense attention with out-of-window logits
// at -inf; returns the dense [heads x n x n] weights.
inline Vec corr_local_dense(const Vec& q, const Vec& k, std::size_t gh, std::size_t gw, std::size_t ck,
                            std::size_t size, std::size_t heads) {
  const std::size_t n = gh * gw, d = ck / heads;
  const auto r = static_cast<long>(size / 2);
  Vec out(heads * n * n, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      const long qy = static_cast<long>(i / gw), qx = static_cast<long>(i % gw);
      Vec logits(n, -std::numeric_limits<double>::infinity());
      for (std::size_t j = 0; j < n; ++j) {
        const long ky = static_cast<long>(j / gw), kx = static_cast<long>(j % gw);
        if (std::labs(ky - qy) > r || std::labs(kx - qx) > r) continue;
        double s = 0;
        for (std::size_t p = 0; p < d; ++p) s += q[i * ck + h * d + p] * k[j * ck + h * d + p];
        logits[j] = s / std::sqrt(static_cast<double>(d));
      }
      auto w = softmax_rows(logits, 1, n);
      for (std::size_t j = 0; j < n; ++j) out[(h * n + i) * n + j] = w[j];
    }
  return out;
}

// Zero-padded depth-wise conv; x [gh*gw x c], kernel [ks x ks x c].
inline Vec depthwise_conv2d(const Vec& x, const Vec& kernel, std::size_t gh, std::size_t gw, std::size_t c,
                            std::size_t ks) {
  Vec out(gh * gw * c, 0.0);
  const long r = static_cast<long>(ks / 2);
  for (long y = 0; y < static_cast<long>(gh); ++y)
    for (long xx = 0; xx < static_cast<long>(gw); ++xx)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0;
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx) {
            const long sy = y + dy, sx = xx + dx;
            if (sy < 0 || sx < 0 || sy >= static_cast<long>(gh) || sx >= static_cast<long>(gw)) continue;
            s += x[(static_cast<std::size_t>(sy) * gw + static_cast<std::size_t>(sx)) * c + ch] *
                 kernel[(static_cast<std::size_t>(dy + r) * ks + static_cast<std::size_t>(dx + r)) * c + ch];
          }
        out[(static_cast<std::size_t>(y) * gw + static_cast<std::size_t>(xx)) * c + ch] = s;
      }
  return out;
}

// Dense conv, weight [ks x ks x cin x cout], stride s sampling at (s*y, s*x).
inline Vec conv2d(const Vec& x, const Vec& w, std::size_t gh, std::size_t gw, std::size_t cin, std::size_t cout,
                  std::size_t ks, std::size_t stride) {
  const std::size_t oh = gh / stride, ow = gw / stride;
  const long r = static_cast<long>(ks / 2);
  Vec out(oh * ow * cout, 0.0);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t co = 0; co < cout; ++co) {
        double s = 0;
        for (long ky = 0; ky < static_cast<long>(ks); ++ky)
          for (long kx = 0; kx < static_cast<long>(ks); ++kx) {
            const long sy = static_cast<long>(oy * stride) + ky - r, sx = static_cast<long>(ox * stride) + kx - r;
            if (sy < 0 || sx < 0 || sy >= static_cast<long>(gh) || sx >= static_cast<long>(gw)) continue;
            for (std::size_t ci = 0; ci < cin; ++ci)
              s += x[(static_cast<std::size_t>(sy) * gw + static_cast<std::size_t>(sx)) * cin + ci] *
                   w[((static_cast<std::size_t>(ky) * ks + static_cast<std::size_t>(kx)) * cin + ci) * cout + co];
          }
        out[(oy * ow + ox) * cout + co] = s;
      }
  return out;
}

inline Vec layer_norm(const Vec& x, std::size_t n, std::size_t c, const Vec& gain, const Vec& bias, double eps = 1e-5) {
  Vec y(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < c; ++j) mu += x[i * c + j];
    mu /= static_cast<double>(c);
    for (std::size_t j = 0; j < c; ++j) var += (x[i * c + j] - mu) * (x[i * c + j] - mu);
    var /= static_cast<double>(c);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = (x[i * c + j] - mu) / std::sqrt(var + eps) * gain[j] + bias[j];
  }
  return y;
}

inline double silu(double x) { return x / (1 + std::exp(-x)); }

// Mean over rows of -log softmax(row)[target].
inline double cross_entropy(const Vec& logits, std::size_t n, std::size_t c, const std::vector<std::size_t>& targets) {
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[i * c + j]);
    total += std::log(z) - logits[i * c + targets[i]];
  }
  return total / static_cast<double>(n);
}

// ---- metrics by direct enumeration ----

struct BinaryMask {
  std::size_t h = 0, w = 0;
  std::vector<int> v;
  int at(long y, long x) const {
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return 0;
    return v[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  }
};

inline double iou(const BinaryMask& p, const BinaryMask& g) {
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < p.v.size(); ++i) {
    inter += p.v[i] && g.v[i];
    uni += p.v[i] || g.v[i];
  }
  return uni == 0 ? 1.0 : inter / uni;
}

inline std::vector<std::pair<long, long>> boundary(const BinaryMask& m) {
  std::vector<std::pair<long, long>> pts;
  for (long y = 0; y < static_cast<long>(m.h); ++y)
    for (long x = 0; x < static_cast<long>(m.w); ++x)
      if (m.at(y, x) && (!m.at(y - 1, x) || !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1)))
        pts.emplace_back(y, x);
  return pts;
}

// For each point of `from`, the exact minimum Euclidean distance to `to`.
inline double within_fraction(const std::vector<std::pair<long, long>>& from,
                              const std::vector<std::pair<long, long>>& to, double tol) {
  std::size_t hit = 0;
  for (auto [y, x] : from) {
    double best = std::numeric_limits<double>::infinity();
    for (auto [yy, xx] : to) best = std::min(best, std::hypot(static_cast<double>(y - yy), static_cast<double>(x - xx)));
    hit += best <= tol;
  }
  return static_cast<double>(hit) / static_cast<double>(from.size());
}

inline double boundary_f(const BinaryMask& p, const BinaryMask& g, double tol) {
  const auto bp = boundary(p), bg = boundary(g);
  if (bp.empty() && bg.empty()) return 1.0;
  if (bp.empty() || bg.empty()) return 0.0;
  const double prec = within_fraction(bp, bg, tol), rec = within_fraction(bg, bp, tol);
  return prec + rec == 0 ? 0.0 : 2 * prec * rec / (prec + rec);
}

}  // namespace oracle
