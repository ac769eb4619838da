// SPDX-License-Identifier: Apache-2.0
#include "ccoe/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <vector>

#include "ccoe/errors.hpp"

namespace ccoe {
namespace kernels {

namespace {

// One rounding per multiply-add when the target has FMA. Every element of a
// product is the same ordered chain over the inner index whatever the
// blocking, so a 1-row call and a many-row call agree bit for bit.
inline float madd(float a, float b, float c) {
#ifdef __FMA__
  return std::fma(a, b, c);
#else
  return a * b + c;
#endif
}

constexpr std::size_t kMr = 4;
constexpr std::size_t kNr = 32;

// c[MR x NR] (row stride n) += sum_p a(r, p) * b[p, :], a(r, p) = a[r*ars + p*acs].
template <std::size_t MR>
inline void micro_tile(const float* a, std::size_t ars, std::size_t acs, const float* b,
                       float* c, std::size_t n, std::size_t depth) {
  float t[MR][kNr];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < kNr; ++j) t[r][j] = c[r * n + j];
  for (std::size_t p = 0; p < depth; ++p) {
    const float* bp = b + p * n;
    for (std::size_t r = 0; r < MR; ++r) {
      const float av = a[r * ars + p * acs];
      for (std::size_t j = 0; j < kNr; ++j) t[r][j] = madd(av, bp[j], t[r][j]);
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < kNr; ++j) c[r * n + j] = t[r][j];
}

// Leftover columns [j0, n) of one row.
inline void row_tail(const float* a, std::size_t acs, const float* b, float* c, std::size_t n,
                     std::size_t depth, std::size_t j0) {
  for (std::size_t j = j0; j < n; ++j) {
    float acc = c[j];
    for (std::size_t p = 0; p < depth; ++p) acc = madd(a[p * acs], b[p * n + j], acc);
    c[j] = acc;
  }
}

void blocked(const float* a, std::size_t ars, std::size_t acs, const float* b, float* c,
             std::size_t m, std::size_t depth, std::size_t n) {
  const std::size_t n_full = n - n % kNr;
  std::size_t i = 0;
  for (; i + kMr <= m; i += kMr) {
    for (std::size_t j = 0; j < n_full; j += kNr)
      micro_tile<kMr>(a + i * ars, ars, acs, b + j, c + i * n + j, n, depth);
    for (std::size_t r = 0; r < kMr; ++r)
      row_tail(a + (i + r) * ars, acs, b, c + (i + r) * n, n, depth, n_full);
  }
  for (; i < m; ++i) {
    for (std::size_t j = 0; j < n_full; j += kNr)
      micro_tile<1>(a + i * ars, ars, acs, b + j, c + i * n + j, n, depth);
    row_tail(a + i * ars, acs, b, c + i * n, n, depth, n_full);
  }
}

}  // namespace

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0f);
  blocked(a, k, 1, b, c, m, k, n);
}

void gemm_at_b_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  // c[k, n] += a^T b: row i of c pairs column i of a with the rows of b.
  blocked(a, 1, k, b, c, k, m, n);
}

void gemm_a_bt(const float* a, const float* b, float* c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate) {
  // Transposing b first keeps the inner loop contiguous.
  thread_local std::vector<float> bt;
  bt.resize(n * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + i] = b[i * n + j];
  gemm(a, bt.data(), c, m, n, k, accumulate);
}

void add_bias(float* x, const float* bias, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    float* xr = x + r * cols;
    for (std::size_t c = 0; c < cols; ++c) xr[c] += bias[c];
  }
}

void sum_rows_acc(const float* x, float* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += xr[c];
  }
}

void softmax_inplace(float* row, std::size_t n) {
  float mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  float sum = 0.0f;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const float inv = 1.0f / sum;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

void layer_norm_forward(const float* x, const float* gain, const float* bias, float* y,
                        float* xhat, float* rstd, std::size_t rows, std::size_t cols, float eps) {
  const float inv_n = 1.0f / static_cast<float>(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    float mean = 0.0f;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean *= inv_n;
    float var = 0.0f;
    for (std::size_t c = 0; c < cols; ++c) {
      const float d = xr[c] - mean;
      var += d * d;
    }
    var *= inv_n;
    const float rs = 1.0f / std::sqrt(var + eps);
    if (rstd) rstd[r] = rs;
    float* yr = y + r * cols;
    float* hr = xhat ? xhat + r * cols : nullptr;
    for (std::size_t c = 0; c < cols; ++c) {
      const float h = (xr[c] - mean) * rs;
      if (hr) hr[c] = h;
      yr[c] = h * gain[c] + bias[c];
    }
  }
}

void layer_norm_backward(const float* dy, const float* xhat, const float* rstd, const float* gain,
                         float* dx, float* dgain, float* dbias, std::size_t rows, std::size_t cols,
                         bool accumulate_dx) {
  const float inv_n = 1.0f / static_cast<float>(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* dyr = dy + r * cols;
    const float* hr = xhat + r * cols;
    float mean_dh = 0.0f;
    float mean_dh_h = 0.0f;
    for (std::size_t c = 0; c < cols; ++c) {
      const float dh = dyr[c] * gain[c];
      mean_dh += dh;
      mean_dh_h += dh * hr[c];
      if (dgain) dgain[c] += dyr[c] * hr[c];
      if (dbias) dbias[c] += dyr[c];
    }
    mean_dh *= inv_n;
    mean_dh_h *= inv_n;
    float* dxr = dx + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      const float g = rstd[r] * (dyr[c] * gain[c] - mean_dh - hr[c] * mean_dh_h);
      dxr[c] = accumulate_dx ? dxr[c] + g : g;
    }
  }
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;

// exp(x) for x <= 0 as 2^k * p(r), |r| <= ln2/2; relative error ~2e-7.
// Plain float arithmetic only, so loops over it vectorize and the scalar
// and vector forms give identical bits.
inline float exp_nonpositive(float x) {
  x = x > -87.0f ? x : -87.0f;
  const float k = std::floor(x * 1.44269504f + 0.5f);
  const float r = (x - k * 0.693359375f) + k * 2.12194440e-4f;
  float p = 1.0f / 720.0f;
  p = p * r + 1.0f / 120.0f;
  p = p * r + 1.0f / 24.0f;
  p = p * r + 1.0f / 6.0f;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(k) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

inline float tanh_approx(float u) {
  const float e = exp_nonpositive(-2.0f * std::fabs(u));
  return std::copysign((1.0f - e) / (1.0f + e), u);
}

inline float gelu_one(float x) {
  const float u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5f * x * (1.0f + tanh_approx(u));
}

inline float gelu_grad_one(float x) {
  const float u = kGeluC * (x + kGeluA * x * x * x);
  const float th = tanh_approx(u);
  return 0.5f * (1.0f + th) + 0.5f * x * (1.0f - th * th) * kGeluC * (1.0f + 3.0f * kGeluA * x * x);
}
}  // namespace

float gelu_scalar(float x) { return gelu_one(x); }

float gelu_grad_scalar(float x) { return gelu_grad_one(x); }

void gelu_forward(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void gelu_backward(const float* x, float* dy, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dy[i] *= gelu_grad_one(x[i]);
}

void attention_row(const float* q_row, const float* k, const float* v, float* out_row,
                   float* probs, std::size_t i, std::size_t t, std::size_t n_heads,
                   std::size_t head_dim, std::size_t stride) {
  const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
  thread_local std::vector<float> scores;
  scores.resize(i + 1);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * head_dim;
    const float* qi = q_row + off;
    for (std::size_t j = 0; j <= i; ++j) {
      const float* kj = k + j * stride + off;
      float s = 0.0f;
      for (std::size_t c = 0; c < head_dim; ++c) s += qi[c] * kj[c];
      scores[j] = s * scale;
    }
    softmax_inplace(scores.data(), i + 1);
    float* oi = out_row + off;
    std::fill(oi, oi + head_dim, 0.0f);
    for (std::size_t j = 0; j <= i; ++j) {
      const float p = scores[j];
      const float* vj = v + j * stride + off;
      for (std::size_t c = 0; c < head_dim; ++c) oi[c] += p * vj[c];
    }
    if (probs) {
      float* pr = probs + (h * t + i) * t;
      std::copy(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(i + 1), pr);
      std::fill(pr + i + 1, pr + t, 0.0f);
    }
  }
}

void attention_forward(const float* q, const float* k, const float* v, float* out, float* probs,
                       std::size_t t, std::size_t n_heads, std::size_t head_dim,
                       std::size_t stride) {
  for (std::size_t i = 0; i < t; ++i)
    attention_row(q + i * stride, k, v, out + i * stride, probs, i, t, n_heads, head_dim, stride);
}

void attention_backward(const float* dout, const float* q, const float* k, const float* v,
                        const float* probs, float* dq, float* dk, float* dv, std::size_t t,
                        std::size_t n_heads, std::size_t head_dim, std::size_t stride) {
  const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
  thread_local std::vector<float> dp;
  dp.resize(t);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * head_dim;
    for (std::size_t i = 0; i < t; ++i) {
      const float* pr = probs + (h * t + i) * t;
      const float* doi = dout + i * stride + off;
      float dot = 0.0f;
      for (std::size_t j = 0; j <= i; ++j) {
        const float* vj = v + j * stride + off;
        float s = 0.0f;
        for (std::size_t c = 0; c < head_dim; ++c) s += doi[c] * vj[c];
        dp[j] = s;
        dot += pr[j] * s;
        float* dvj = dv + j * stride + off;
        for (std::size_t c = 0; c < head_dim; ++c) dvj[c] += pr[j] * doi[c];
      }
      const float* qi = q + i * stride + off;
      float* dqi = dq + i * stride + off;
      for (std::size_t j = 0; j <= i; ++j) {
        const float ds = pr[j] * (dp[j] - dot) * scale;
        if (ds == 0.0f) continue;
        const float* kj = k + j * stride + off;
        float* dkj = dk + j * stride + off;
        for (std::size_t c = 0; c < head_dim; ++c) {
          dqi[c] += ds * kj[c];
          dkj[c] += ds * qi[c];
        }
      }
    }
  }
}

}  // namespace kernels

namespace {

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a rank-2 tensor, got " +
                         t.shape().to_string());
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree for " + a.shape().to_string() +
                         " x " + b.shape().to_string());
  }
  Tensor c({a.dim(0), b.dim(1)});
  kernels::gemm(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1), false);
  require_finite(c, "matmul");
  return c;
}

Tensor softmax_rows(const Tensor& x) {
  require_rank2(x, "softmax_rows");
  Tensor y = x;
  if (x.dim(1) == 0) return y;
  for (std::size_t i = 0; i < x.dim(0); ++i) kernels::softmax_inplace(y.row(i).data(), x.dim(1));
  require_finite(y, "softmax_rows");
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  require_rank2(x, "layer_norm");
  if (!(eps > 0.0f)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t n = x.dim(1);
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias " + gain.shape().to_string() + "/" +
                         bias.shape().to_string() + " do not match " + x.shape().to_string());
  }
  Tensor y(x.shape());
  kernels::layer_norm_forward(x.data(), gain.data(), bias.data(), y.data(), nullptr, nullptr,
                              x.dim(0), n, eps);
  require_finite(y, "layer_norm");
  return y;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads) {
  require_rank2(q, "causal_attention");
  if (!(q.shape() == k.shape()) || !(q.shape() == v.shape())) {
    throw DimensionError("causal_attention: q/k/v shapes differ: " + q.shape().to_string() + ", " +
                         k.shape().to_string() + ", " + v.shape().to_string());
  }
  const std::size_t d = q.dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw ConfigError("causal_attention: width " + std::to_string(d) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  Tensor out(q.shape());
  kernels::attention_forward(q.data(), k.data(), v.data(), out.data(), nullptr, q.dim(0), n_heads,
                             d / n_heads, d);
  require_finite(out, "causal_attention");
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor y = x;
  kernels::gelu_forward(y.data(), y.data(), y.size());
  require_finite(y, "gelu");
  return y;
}

}  // namespace ccoe
