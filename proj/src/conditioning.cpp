#include "glsm/conditioning.hpp"

#include <cmath>
#include <stdexcept>

#include "glsm/ops.hpp"

namespace glsm {

SpeechEncoder::SpeechEncoder(const ConditioningConfig& config, Rng& rng) : config_(config) {
  if (config.d_model % 2 != 0) throw std::invalid_argument("d_model must be even");
  if (config.downsample != 4) throw std::invalid_argument("speech encoder expects a downsample factor of 4");
  const std::size_t half = config.d_model / 2;
  audio1_ = Conv1d(1, half, 5, 2, rng);
  audio1_.bias = Tensor();
  audio2_ = Conv1d(half, half, 3, 2, rng);
  text_table_ = param_normal({kTokenVocab, half}, 1.0 / std::sqrt(static_cast<double>(half)), rng);
  null_ = param_normal({1, config.d_model}, 1.0 / std::sqrt(static_cast<double>(config.d_model)), rng);
}

SpeechCondition SpeechEncoder::encode(std::span<const SpeechTrack* const> tracks) const {
  if (tracks.empty()) throw std::invalid_argument("encode: no speech tracks");
  const std::size_t t = tracks[0]->envelope.numel();
  if (t == 0 || t % config_.downsample != 0)
    throw ShapeError("speech length must be a positive multiple of " + std::to_string(config_.downsample));
  const std::size_t b = tracks.size();
  std::vector<double> env(b * t);
  std::vector<std::size_t> ids(b * t);
  for (std::size_t i = 0; i < b; ++i) {
    const auto& tr = *tracks[i];
    if (tr.envelope.numel() != t || tr.tokens.size() != t) throw ShapeError("speech track length mismatch");
    for (std::size_t k = 0; k < t; ++k) {
      env[i * t + k] = tr.envelope.at(k);
      if (tr.tokens[k] >= kTokenVocab) throw std::invalid_argument("speech token out of range");
      ids[i * t + k] = tr.tokens[k];
    }
  }
  Tensor e({b * t, 1}, std::move(env));
  Tensor audio = audio2_(ops::gelu(audio1_(e, t)), t / 2);
  Tensor text = ops::avg_pool_rows(embed(text_table_, ids), t, config_.downsample);
  SpeechCondition c;
  c.features = ops::concat_cols(audio, text);
  c.batch = b;
  c.frames = t / config_.downsample;
  c.null_mask.assign(b, 0);
  return c;
}

SpeechCondition SpeechEncoder::encode(const SpeechTrack& track) const {
  const SpeechTrack* p = &track;
  return encode(std::span<const SpeechTrack* const>(&p, 1));
}

SpeechCondition SpeechEncoder::null_condition(std::size_t batch, std::size_t frames) const {
  SpeechCondition c;
  std::vector<std::size_t> zero(batch * frames, 0);
  c.features = ops::gather_rows(null_, zero);
  c.batch = batch;
  c.frames = frames;
  c.null_mask.assign(batch, 1);
  return c;
}

SpeechCondition SpeechEncoder::apply_null(const SpeechCondition& cond, std::span<const std::uint8_t> mask) const {
  if (mask.size() != cond.batch) throw std::invalid_argument("apply_null: mask size does not match batch");
  bool any = false;
  for (auto m : mask) any = any || m != 0;
  if (!any) return cond;
  const std::size_t rows = cond.batch * cond.frames;
  std::vector<std::size_t> idx(rows);
  for (std::size_t b = 0; b < cond.batch; ++b)
    for (std::size_t j = 0; j < cond.frames; ++j)
      idx[b * cond.frames + j] = mask[b] ? rows : b * cond.frames + j;
  SpeechCondition out = cond;
  out.features = ops::gather_rows(ops::concat_rows(cond.features, null_), idx);
  for (std::size_t b = 0; b < cond.batch; ++b) out.null_mask[b] = cond.null_mask[b] || mask[b];
  return out;
}

void SpeechEncoder::collect(ParamList& out, const std::string& prefix) const {
  audio1_.collect(out, prefix + ".audio1");
  audio2_.collect(out, prefix + ".audio2");
  out.push_back({prefix + ".text", text_table_});
  out.push_back({prefix + ".null", null_});
}

std::vector<std::uint8_t> dropout_mask(std::size_t batch, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("dropout probability must lie in [0, 1]");
  std::vector<std::uint8_t> mask(batch);
  for (auto& m : mask) m = rng.uniform() < p ? 1 : 0;
  return mask;
}

SpeechCondition dropout_condition(const SpeechCondition& cond, double p, Rng& rng, const SpeechEncoder& encoder) {
  return encoder.apply_null(cond, dropout_mask(cond.batch, p, rng));
}

FusionStack::FusionStack(const ConditioningConfig& config, Rng& rng) : config_(config) {
  for (std::size_t l = 0; l < config.cross_layers; ++l) {
    CrossAttentionBlock b;
    b.norm_attn = LayerNorm(config.d_model);
    b.norm_ffn = LayerNorm(config.d_model);
    b.attn = MultiHeadAttention(config.d_model, config.heads, rng);
    b.ffn = FeedForward(config.d_model, config.ffn, rng);
    blocks_.push_back(std::move(b));
  }
}

namespace {

void check_tokens(const Tensor& tokens, std::size_t per_frame, const SpeechCondition& cond) {
  if (per_frame == 0 || tokens.rows() != cond.batch * cond.frames * per_frame)
    throw ShapeError("fuse: token rows do not match the speech condition");
  if (tokens.cols() != cond.features.cols()) throw ShapeError("fuse: token width differs from condition width");
}

}  // namespace

Tensor FusionStack::inject(const Tensor& tokens, std::size_t per_frame, const SpeechCondition& cond) const {
  check_tokens(tokens, per_frame, cond);
  if (!config_.aligned_injection) return tokens;
  std::vector<std::size_t> idx(tokens.rows());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i / per_frame;
  return ops::add(tokens, ops::gather_rows(cond.features, idx));
}

Tensor FusionStack::block(std::size_t layer, const Tensor& h, std::size_t per_frame,
                          const SpeechCondition& cond) const {
  check_tokens(h, per_frame, cond);
  const auto& b = blocks_.at(layer);
  Tensor x = ops::add(h, b.attn(b.norm_attn(h), cond.features, cond.frames * per_frame, cond.frames));
  return ops::add(x, b.ffn(b.norm_ffn(x)));
}

Tensor FusionStack::operator()(const Tensor& tokens, std::size_t per_frame, const SpeechCondition& cond) const {
  Tensor h = inject(tokens, per_frame, cond);
  for (std::size_t l = 0; l < blocks_.size(); ++l) h = block(l, h, per_frame, cond);
  return h;
}

std::vector<double> FusionStack::attention_weights(std::size_t layer, const Tensor& h, std::size_t per_frame,
                                                   const SpeechCondition& cond) const {
  check_tokens(h, per_frame, cond);
  const auto& b = blocks_.at(layer);
  return ops::attention_weights(b.attn.query(b.norm_attn(h)), b.attn.key(cond.features),
                                {cond.frames * per_frame, cond.frames, b.attn.heads});
}

void FusionStack::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string p = prefix + "." + std::to_string(l);
    blocks_[l].norm_attn.collect(out, p + ".norm_attn");
    blocks_[l].attn.collect(out, p + ".attn");
    blocks_[l].norm_ffn.collect(out, p + ".norm_ffn");
    blocks_[l].ffn.collect(out, p + ".ffn");
  }
}

}  // namespace glsm
