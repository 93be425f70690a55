#include "glsm/generator.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "glsm/ops.hpp"
#include "glsm/rng.hpp"

namespace glsm {

nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"blocks", c.blocks},         {"d_model", c.d_model},
          {"ffn", c.ffn},               {"heads", c.heads},
          {"step_embed", c.step_embed}, {"regions", c.regions},
          {"d_latent", c.d_latent},     {"max_frames", c.max_frames},
          {"cross_layers", c.cross_layers}, {"cross_ffn", c.cross_ffn},
          {"spatial", c.spatial},       {"temporal", c.temporal},
          {"positional", c.positional}, {"temporal_first", c.temporal_first},
          {"aligned_injection", c.aligned_injection}, {"seed", c.seed}};
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.blocks = j.at("blocks");
  c.d_model = j.at("d_model");
  c.ffn = j.at("ffn");
  c.heads = j.at("heads");
  c.step_embed = j.at("step_embed");
  c.regions = j.at("regions");
  c.d_latent = j.at("d_latent");
  c.max_frames = j.at("max_frames");
  c.cross_layers = j.at("cross_layers");
  c.cross_ffn = j.at("cross_ffn");
  c.spatial = j.at("spatial");
  c.temporal = j.at("temporal");
  c.positional = j.at("positional");
  c.temporal_first = j.at("temporal_first");
  c.aligned_injection = j.at("aligned_injection");
  c.seed = j.at("seed");
  return c;
}

bool valid_step_size(double d) {
  if (d == 0.0) return true;
  for (std::size_t k = 0; k <= kMaxStepLog2; ++k)
    if (d == std::ldexp(1.0, -static_cast<int>(k))) return true;
  return false;
}

std::size_t step_index(double d) {
  if (d == 0.0) return 0;
  for (std::size_t k = 0; k <= kMaxStepLog2; ++k)
    if (d == std::ldexp(1.0, -static_cast<int>(k))) return k + 1;
  throw std::invalid_argument("step size must be 0 or 2^-k with k <= " + std::to_string(kMaxStepLog2));
}

std::vector<std::size_t> frame_to_region_major(std::size_t batch, std::size_t frames, std::size_t regions) {
  std::vector<std::size_t> idx(batch * frames * regions);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < regions; ++r)
      for (std::size_t j = 0; j < frames; ++j)
        idx[(b * regions + r) * frames + j] = (b * frames + j) * regions + r;
  return idx;
}

std::vector<std::size_t> region_to_frame_major(std::size_t batch, std::size_t frames, std::size_t regions) {
  std::vector<std::size_t> idx(batch * frames * regions);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < frames; ++j)
      for (std::size_t r = 0; r < regions; ++r)
        idx[(b * frames + j) * regions + r] = (b * regions + r) * frames + j;
  return idx;
}

Generator::Generator(const GeneratorConfig& config) : config_(config) {
  const std::size_t n = config.regions, dm = config.d_model;
  if (n == 0 || config.d_latent == 0 || config.max_frames == 0) throw std::invalid_argument("empty generator grid");
  if (config.heads == 0 || dm % config.heads != 0) throw std::invalid_argument("d_model must be divisible by heads");
  if (config.step_embed % 4 != 0) throw std::invalid_argument("step embedding width must be a multiple of 4");
  Rng rng(mix_seed(config.seed, 0x6e6));
  ConditioningConfig cc;
  cc.d_model = dm;
  cc.heads = config.heads;
  cc.ffn = config.cross_ffn;
  cc.cross_layers = config.cross_layers;
  cc.aligned_injection = config.aligned_injection;
  speech_ = SpeechEncoder(cc, rng);
  fusion_ = FusionStack(cc, rng);

  in_weight_ = param_fan_in({n, config.d_latent, dm}, config.d_latent, rng);
  in_bias_ = param_zeros({n, dm});
  out_norm_ = LayerNorm(dm);
  out_weight_ = param_fan_in({n, dm, config.d_latent}, dm, rng);
  out_bias_ = param_zeros({n, config.d_latent});
  if (config.positional) {
    spatial_table_ = param_normal({n, dm}, 0.1, rng);
    temporal_table_ = param_normal({config.max_frames, dm}, 0.1, rng);
  }
  step_table_ = param_normal({kMaxStepLog2 + 2, config.step_embed / 2}, 1.0, rng);
  step_in_ = Linear(config.step_embed, dm, rng);
  step_out_ = Linear(dm, dm, rng);

  for (std::size_t i = 0; i < config.blocks; ++i) {
    AttentionBlock b;
    if (config.spatial) {
      b.norm_spatial = LayerNorm(dm);
      b.spatial = MultiHeadAttention(dm, config.heads, rng);
      if (config.positional) b.spatial_bias = param_zeros({config.heads, n, n});
    }
    if (config.temporal) {
      b.norm_temporal = LayerNorm(dm);
      b.temporal = MultiHeadAttention(dm, config.heads, rng);
      if (config.positional) b.temporal_bias = param_zeros({config.heads, 2 * config.max_frames - 1});
    }
    b.norm_ffn = LayerNorm(dm);
    b.ffn = FeedForward(dm, config.ffn, rng);
    blocks_.push_back(std::move(b));
  }
}

void Generator::check_inputs(const Tensor& x, std::size_t batch, std::size_t frames, std::span<const double> t,
                             std::span<const double> d) const {
  if (batch == 0 || frames == 0) throw ShapeError("generator: empty batch");
  if (frames > config_.max_frames) throw ShapeError("generator: more latent frames than the temporal table holds");
  if (x.rank() != 2 || x.rows() != batch * frames * config_.regions || x.cols() != config_.d_latent)
    throw ShapeError("generator: latent grid shape mismatch");
  if (t.size() != batch || d.size() != batch) throw ShapeError("generator: one t and d per sample required");
  for (double v : t)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("generator: t must lie in [0, 1]");
  for (double v : d) step_index(v);
}

Tensor Generator::step_embedding(std::span<const double> t, std::span<const double> d) const {
  const std::size_t b = t.size(), half = config_.step_embed / 2, quarter = half / 2;
  std::vector<double> sin_feat(b * half);
  std::vector<std::size_t> ids(b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < quarter; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(quarter));
      const double a = 1000.0 * t[i] * freq;
      sin_feat[i * half + k] = std::sin(a);
      sin_feat[i * half + quarter + k] = std::cos(a);
    }
    ids[i] = step_index(d[i]);
  }
  Tensor feat = ops::concat_cols(Tensor({b, half}, std::move(sin_feat)), embed(step_table_, ids));
  return step_out_(ops::silu(step_in_(feat)));
}

Tensor Generator::embed_tokens(const Tensor& x, std::size_t batch, std::size_t frames, std::span<const double> t,
                               std::span<const double> d) const {
  check_inputs(x, batch, frames, t, d);
  const std::size_t n = config_.regions, rows = batch * frames * n;
  Tensor h = ops::grouped_linear(x, in_weight_, in_bias_);
  std::vector<std::size_t> sample(rows), frame(rows), region(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    region[i] = i % n;
    frame[i] = (i / n) % frames;
    sample[i] = i / (n * frames);
  }
  if (config_.positional) {
    h = ops::add(h, ops::gather_rows(spatial_table_, region));
    h = ops::add(h, ops::gather_rows(temporal_table_, frame));
  }
  return ops::add(h, ops::gather_rows(step_embedding(t, d), sample));
}

Tensor Generator::spatial_attention(std::size_t block, const Tensor& h, std::size_t batch, std::size_t frames) const {
  const auto& b = blocks_.at(block);
  if (!config_.spatial) return h;
  const std::size_t n = config_.regions;
  if (h.rows() != batch * frames * n) throw ShapeError("spatial_attention: grid shape mismatch");
  Tensor x = b.norm_spatial(h);
  return ops::add(h, b.spatial(x, x, n, n, b.spatial_bias));
}

Tensor Generator::temporal_attention(std::size_t block, const Tensor& h, std::size_t batch,
                                     std::size_t frames) const {
  const auto& b = blocks_.at(block);
  if (!config_.temporal) return h;
  const std::size_t n = config_.regions;
  if (h.rows() != batch * frames * n) throw ShapeError("temporal_attention: grid shape mismatch");
  Tensor bias;
  if (config_.positional) {
    const std::size_t m = config_.max_frames, heads = config_.heads;
    std::vector<std::size_t> idx(heads * frames * frames);
    for (std::size_t hd = 0; hd < heads; ++hd)
      for (std::size_t i = 0; i < frames; ++i)
        for (std::size_t j = 0; j < frames; ++j)
          idx[(hd * frames + i) * frames + j] = hd * (2 * m - 1) + (i + m - 1 - j);
    bias = ops::gather_elements(b.temporal_bias, idx, {heads, frames, frames});
  }
  const auto to_region = frame_to_region_major(batch, frames, n);
  const auto to_frame = region_to_frame_major(batch, frames, n);
  Tensor x = ops::gather_rows(b.norm_temporal(h), to_region);
  Tensor a = b.temporal(x, x, frames, frames, bias);
  return ops::add(h, ops::gather_rows(a, to_frame));
}

Tensor Generator::trunk(const Tensor& tokens, std::size_t batch, std::size_t frames,
                        const SpeechCondition& cond) const {
  if (cond.batch != batch || cond.frames != frames)
    throw ShapeError("generator: speech condition does not match the latent grid");
  Tensor h = fusion_(tokens, config_.regions, cond);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (config_.temporal_first) {
      h = temporal_attention(i, h, batch, frames);
      h = spatial_attention(i, h, batch, frames);
    } else {
      h = spatial_attention(i, h, batch, frames);
      h = temporal_attention(i, h, batch, frames);
    }
    h = ops::add(h, blocks_[i].ffn(blocks_[i].norm_ffn(h)));
  }
  return h;
}

Tensor Generator::forward(const Tensor& x, std::size_t batch, std::size_t frames, std::span<const double> t,
                          std::span<const double> d, const SpeechCondition& cond) const {
  Tensor h = trunk(embed_tokens(x, batch, frames, t, d), batch, frames, cond);
  return ops::grouped_linear(out_norm_(h), out_weight_, out_bias_);
}

ParamList Generator::parameters() const {
  ParamList p;
  speech_.collect(p, "speech");
  fusion_.collect(p, "fusion");
  p.push_back({"in.weight", in_weight_});
  p.push_back({"in.bias", in_bias_});
  if (config_.positional) {
    p.push_back({"pos.spatial", spatial_table_});
    p.push_back({"pos.temporal", temporal_table_});
  }
  p.push_back({"step.table", step_table_});
  step_in_.collect(p, "step.in");
  step_out_.collect(p, "step.out");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    const std::string pre = "blocks." + std::to_string(i);
    if (config_.spatial) {
      b.norm_spatial.collect(p, pre + ".norm_spatial");
      b.spatial.collect(p, pre + ".spatial");
      if (config_.positional) p.push_back({pre + ".spatial_bias", b.spatial_bias});
    }
    if (config_.temporal) {
      b.norm_temporal.collect(p, pre + ".norm_temporal");
      b.temporal.collect(p, pre + ".temporal");
      if (config_.positional) p.push_back({pre + ".temporal_bias", b.temporal_bias});
    }
    b.norm_ffn.collect(p, pre + ".norm_ffn");
    b.ffn.collect(p, pre + ".ffn");
  }
  out_norm_.collect(p, "out.norm");
  p.push_back({"out.weight", out_weight_});
  p.push_back({"out.bias", out_bias_});
  return p;
}

void Generator::save(Checkpoint& ckpt, const std::string& prefix) const { save_params(ckpt, parameters(), prefix); }

void Generator::load(const Checkpoint& ckpt, const std::string& prefix) { load_params(ckpt, parameters(), prefix); }

}  // namespace glsm
