// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

#include "ccoe/tensor.hpp"

namespace ccoe {

// Tensor-level kernels. Pure functions; every result is checked for finiteness.

/// c[m,n] = a[m,k] * b[k,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Row-wise softmax with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);

/// Per-row normalization to zero mean / unit variance, then gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);

/// Multi-head scaled dot-product attention with a strict causal mask.
/// q, k, v are [t, d]; d must be divisible by n_heads.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads);

/// Tanh-approximated GELU, element-wise.
Tensor gelu(const Tensor& x);

inline constexpr float kLayerNormEps = 1e-5f;

namespace kernels {

// Raw row-major building blocks shared by inference and the hand-written
// backward passes. Sizes are trusted; callers validate shapes.

/// c[m,n] (+)= a[m,k] * b[k,n]
void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate);

/// c[k,n] += a[m,k]^T * b[m,n]   (weight gradients)
void gemm_at_b_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                   std::size_t n);

/// c[m,k] (+)= a[m,n] * b[k,n]^T   (input gradients)
void gemm_a_bt(const float* a, const float* b, float* c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate);

/// x[r, :] += bias for every row.
void add_bias(float* x, const float* bias, std::size_t rows, std::size_t cols);

/// out[c] += sum_r x[r, c]
void sum_rows_acc(const float* x, float* out, std::size_t rows, std::size_t cols);

/// In-place stable softmax over one row.
void softmax_inplace(float* row, std::size_t n);

/// y = layer_norm(x); stores xhat and 1/std per row when the pointers are non-null.
void layer_norm_forward(const float* x, const float* gain, const float* bias, float* y,
                        float* xhat, float* rstd, std::size_t rows, std::size_t cols, float eps);

/// dx (+)= d layer_norm / dx; dgain / dbias accumulated when non-null.
void layer_norm_backward(const float* dy, const float* xhat, const float* rstd, const float* gain,
                         float* dx, float* dgain, float* dbias, std::size_t rows, std::size_t cols,
                         bool accumulate_dx);

/// tanh-form GELU; tanh comes from a polynomial exp accurate to ~2e-7.
float gelu_scalar(float x);
float gelu_grad_scalar(float x);
/// y = gelu(x) elementwise; same bits as gelu_scalar.
void gelu_forward(const float* x, float* y, std::size_t n);
/// dy *= gelu'(x) elementwise.
void gelu_backward(const float* x, float* dy, std::size_t n);

/// Causal attention for one sequence of length t. q/k/v/out use row stride
/// `stride` (the model width); head h occupies columns [h*dh, (h+1)*dh).
/// probs (optional) receives [n_heads, t, t] attention weights.
void attention_forward(const float* q, const float* k, const float* v, float* out, float* probs,
                       std::size_t t, std::size_t n_heads, std::size_t head_dim,
                       std::size_t stride);

/// Attention output for query row i over key/value rows 0..i. attention_forward
/// is this applied to every row; incremental decoding calls it directly.
/// probs (optional) is the [n_heads, t, t] buffer; row i of each head is written.
void attention_row(const float* q_row, const float* k, const float* v, float* out_row,
                   float* probs, std::size_t i, std::size_t t, std::size_t n_heads,
                   std::size_t head_dim, std::size_t stride);

/// Backward of attention_forward; dq/dk/dv are accumulated.
void attention_backward(const float* dout, const float* q, const float* k, const float* v,
                        const float* probs, float* dq, float* dk, float* dv, std::size_t t,
                        std::size_t n_heads, std::size_t head_dim, std::size_t stride);

}  // namespace kernels
}  // namespace ccoe
