#include "glsm/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "glsm/ops.hpp"

namespace glsm {

Tensor param_zeros(Shape shape) {
  Tensor t(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

Tensor param_ones(Shape shape) {
  Tensor t = Tensor::full(std::move(shape), 1.0);
  t.set_requires_grad(true);
  return t;
}

Tensor param_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * stddev;
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor param_uniform(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor param_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  return param_uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

std::vector<Tensor> tensors_of(const ParamList& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init)
    : weight(zero_init ? param_zeros({in, out}) : param_fan_in({in, out}, in, rng)),
      bias(param_zeros({out})) {}

Tensor Linear::operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(std::size_t width) : gain(param_ones({width})), bias(param_zeros({width})) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return ops::layer_norm(x, gain, bias); }

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

FeedForward::FeedForward(std::size_t width, std::size_t hidden, Rng& rng)
    : up(width, hidden, rng), down(hidden, width, rng) {}

Tensor FeedForward::operator()(const Tensor& x) const { return down(ops::gelu(up(x))); }

void FeedForward::collect(ParamList& out, const std::string& prefix) const {
  up.collect(out, prefix + ".up");
  down.collect(out, prefix + ".down");
}

Conv1d::Conv1d(std::size_t c_in, std::size_t c_out, std::size_t width, std::size_t stride_, Rng& rng,
               bool zero_init)
    : kernel(zero_init ? param_zeros({width, c_in, c_out})
                       : param_fan_in({width, c_in, c_out}, width * c_in, rng)),
      bias(param_zeros({c_out})),
      stride(stride_) {}

Tensor Conv1d::operator()(const Tensor& x, std::size_t seq_len) const {
  return ops::conv1d(x, kernel, bias, seq_len, stride);
}

void Conv1d::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".kernel", kernel});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

MultiHeadAttention::MultiHeadAttention(std::size_t width, std::size_t heads_, Rng& rng)
    : query(width, width, rng), key(width, width, rng), value(width, width, rng), out(width, width, rng),
      heads(heads_) {
  if (heads == 0 || width % heads != 0) throw std::invalid_argument("attention width must be divisible by heads");
}

Tensor MultiHeadAttention::operator()(const Tensor& x, const Tensor& context, std::size_t query_len,
                                      std::size_t key_len, const Tensor& logit_bias) const {
  Tensor a = ops::attention(query(x), key(context), value(context), {query_len, key_len, heads}, logit_bias);
  return out(a);
}

void MultiHeadAttention::collect(ParamList& out_list, const std::string& prefix) const {
  query.collect(out_list, prefix + ".query");
  key.collect(out_list, prefix + ".key");
  value.collect(out_list, prefix + ".value");
  out.collect(out_list, prefix + ".out");
}

void save_params(Checkpoint& ckpt, const ParamList& params, const std::string& prefix) {
  for (const auto& p : params) ckpt.tensors[prefix + p.name] = p.tensor;
}

void load_params(const Checkpoint& ckpt, const ParamList& params, const std::string& prefix) {
  for (const auto& p : params) {
    const auto it = ckpt.tensors.find(prefix + p.name);
    if (it == ckpt.tensors.end()) throw FormatError("checkpoint missing tensor " + prefix + p.name);
    if (it->second.shape() != p.tensor.shape()) throw FormatError("checkpoint shape mismatch for " + prefix + p.name);
    Tensor dst = p.tensor;
    std::copy(it->second.values().begin(), it->second.values().end(), dst.values_mut().begin());
  }
}

Tensor embed(const Tensor& table, std::span<const std::size_t> ids) { return ops::gather_rows(table, ids); }

}  // namespace glsm
