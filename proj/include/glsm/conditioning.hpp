#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "glsm/data.hpp"
#include "glsm/nn.hpp"
#include "glsm/rng.hpp"
#include "glsm/tensor.hpp"

namespace glsm {

struct ConditioningConfig {
  std::size_t d_model = 256;
  std::size_t heads = 4;
  std::size_t ffn = 1024;
  std::size_t cross_layers = 3;
  std::size_t downsample = 4;  // frames per latent step
  // Adds speech frame j to every gesture token of latent frame j before the
  // cross-attention stack.
  bool aligned_injection = true;
};

/// Speech features for a batch, one block of `frames` rows per sample.
struct SpeechCondition {
  Tensor features;  // (batch * frames) x d_model
  std::size_t batch = 0;
  std::size_t frames = 0;                // T'
  std::vector<std::uint8_t> null_mask;   // 1 where the sample carries the null embedding

  bool is_null(std::size_t b) const { return null_mask.at(b) != 0; }
};

/// Audio-envelope conv stack plus a token embedding, concatenated.
class SpeechEncoder {
 public:
  SpeechEncoder() = default;
  SpeechEncoder(const ConditioningConfig& config, Rng& rng);

  // All tracks must share a length divisible by the downsample factor.
  // Throws ShapeError on a length mismatch.
  SpeechCondition encode(std::span<const SpeechTrack* const> tracks) const;
  SpeechCondition encode(const SpeechTrack& track) const;
  SpeechCondition null_condition(std::size_t batch, std::size_t frames) const;
  // Replaces the samples flagged in `mask` by the null embedding.
  SpeechCondition apply_null(const SpeechCondition& cond, std::span<const std::uint8_t> mask) const;

  const Tensor& null_embedding() const { return null_; }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  ConditioningConfig config_;
  Conv1d audio1_, audio2_;  // audio1_ has no bias so silence maps to a constant
  Tensor text_table_;       // {kTokenVocab, d_model / 2}
  Tensor null_;             // {1, d_model}
};

// Per-sample drop flags, each set with probability p.
std::vector<std::uint8_t> dropout_mask(std::size_t batch, double p, Rng& rng);
SpeechCondition dropout_condition(const SpeechCondition& cond, double p, Rng& rng,
                                  const SpeechEncoder& encoder);

struct CrossAttentionBlock {
  LayerNorm norm_attn, norm_ffn;
  MultiHeadAttention attn;
  FeedForward ffn;
};

/// Gesture tokens attend to speech frames through stacked pre-norm blocks.
class FusionStack {
 public:
  FusionStack() = default;
  FusionStack(const ConditioningConfig& config, Rng& rng);

  // tokens: cond.batch groups of frames * tokens_per_frame rows, ordered by
  // frame then token. Output has the same shape.
  Tensor operator()(const Tensor& tokens, std::size_t tokens_per_frame, const SpeechCondition& cond) const;
  // Frame-aligned addition of speech features (identity when disabled).
  Tensor inject(const Tensor& tokens, std::size_t tokens_per_frame, const SpeechCondition& cond) const;
  // One cross-attention block without the injection step.
  Tensor block(std::size_t layer, const Tensor& tokens, std::size_t tokens_per_frame,
               const SpeechCondition& cond) const;
  // Attention probabilities of layer `layer` for the given block input.
  std::vector<double> attention_weights(std::size_t layer, const Tensor& tokens, std::size_t tokens_per_frame,
                                        const SpeechCondition& cond) const;

  std::size_t layers() const { return blocks_.size(); }
  std::vector<CrossAttentionBlock>& blocks() { return blocks_; }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  ConditioningConfig config_;
  std::vector<CrossAttentionBlock> blocks_;
};

}  // namespace glsm
