#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "glsm/tensor.hpp"

// Differentiable operations. Matrices are row-major [rows x cols]; sequence
// batches are stacked along rows with a fixed per-sequence length.
namespace glsm::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
// x[r x in] * w[in x out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
// Row i uses weight slice (i % groups) of w{groups, in, out} and bias{groups, out}.
Tensor grouped_linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// Adds a row vector (numel == cols) to every row.
Tensor add_row(const Tensor& a, const Tensor& row);

Tensor reshape(const Tensor& x, Shape shape);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
// out[i] = x.flat[index[i]], reshaped to `shape`.
Tensor gather_elements(const Tensor& x, std::span<const std::size_t> index, Shape shape);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(const Tensor& a, const Tensor& b);

Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);

// x[B*T x c_in], kernel{width, c_in, c_out}, bias{c_out}. Same padding for
// odd widths; output length per sequence is ceil(T / stride).
Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t seq_len,
              std::size_t stride = 1);
// Nearest-neighbour upsampling along each sequence.
Tensor upsample_rows(const Tensor& x, std::size_t seq_len, std::size_t factor);
// Linear interpolation between neighbouring rows of each sequence, ends clamped.
Tensor upsample_linear_rows(const Tensor& x, std::size_t seq_len, std::size_t factor);
// Mean over consecutive blocks of `factor` rows within each sequence.
Tensor avg_pool_rows(const Tensor& x, std::size_t seq_len, std::size_t factor);

struct AttentionShape {
  std::size_t query_len;  // queries per group
  std::size_t key_len;    // keys per group
  std::size_t heads;
};

/// Grouped multi-head scaled dot-product attention.
///
/// q holds G groups of `query_len` rows, k and v hold G groups of `key_len`
/// rows. Columns are split evenly across heads. `logit_bias`, when defined,
/// has shape {heads, query_len, key_len} and is added to every group's
/// logits before the softmax.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& shape,
                 const Tensor& logit_bias = {});

// Attention probabilities for inspection, {G * heads * query_len * key_len}.
std::vector<double> attention_weights(const Tensor& q, const Tensor& k,
                                      const AttentionShape& shape,
                                      const Tensor& logit_bias = {});

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

// Forward value of b, gradient routed to a (straight-through estimator).
Tensor stop_gradient_replace(const Tensor& a, const Tensor& b);

}  // namespace glsm::ops
