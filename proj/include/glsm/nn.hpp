#pragma once

#include <string>
#include <vector>

#include "glsm/ops.hpp"
#include "glsm/rng.hpp"
#include "glsm/serialize.hpp"
#include "glsm/tensor.hpp"

namespace glsm {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

// Trainable leaf initialisers.
Tensor param_zeros(Shape shape);
Tensor param_ones(Shape shape);
Tensor param_normal(Shape shape, double stddev, Rng& rng);
Tensor param_uniform(Shape shape, double bound, Rng& rng);
// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor param_fan_in(Shape shape, std::size_t fan_in, Rng& rng);

std::vector<Tensor> tensors_of(const ParamList& params);
std::size_t parameter_count(const ParamList& params);

// Linear layer y = x W + b.
struct Linear {
  Tensor weight;  // {in, out}
  Tensor bias;    // {out}

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init = false);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Two-layer GELU feed-forward network.
struct FeedForward {
  Linear up;
  Linear down;

  FeedForward() = default;
  FeedForward(std::size_t width, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct Conv1d {
  Tensor kernel;  // {width, c_in, c_out}
  Tensor bias;    // {c_out}
  std::size_t stride = 1;

  Conv1d() = default;
  Conv1d(std::size_t c_in, std::size_t c_out, std::size_t width, std::size_t stride, Rng& rng,
         bool zero_init = false);
  // x holds sequences of `seq_len` rows stacked along rows.
  Tensor operator()(const Tensor& x, std::size_t seq_len) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Multi-head attention with separate query/key/value/output projections.
struct MultiHeadAttention {
  Linear query, key, value, out;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t width, std::size_t heads, Rng& rng);
  // Rows of `x` and `context` are grouped as described by `shape`.
  Tensor operator()(const Tensor& x, const Tensor& context, std::size_t query_len, std::size_t key_len,
                    const Tensor& logit_bias = {}) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Row lookup into a {vocab, width} table.
Tensor embed(const Tensor& table, std::span<const std::size_t> ids);

// Copies parameters into / out of a checkpoint under `prefix`. load_params
// throws FormatError on a missing tensor or a shape mismatch.
void save_params(Checkpoint& ckpt, const ParamList& params, const std::string& prefix);
void load_params(const Checkpoint& ckpt, const ParamList& params, const std::string& prefix);

}  // namespace glsm
