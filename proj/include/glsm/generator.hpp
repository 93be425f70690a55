#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "glsm/conditioning.hpp"
#include "glsm/nn.hpp"
#include "glsm/serialize.hpp"
#include "glsm/tensor.hpp"

namespace glsm {

struct GeneratorConfig {
  std::size_t blocks = 8;
  std::size_t d_model = 256;
  std::size_t ffn = 1024;
  std::size_t heads = 4;
  std::size_t step_embed = 256;  // timestep embedding width
  std::size_t regions = 4;
  std::size_t d_latent = 128;    // per-region latent width
  std::size_t max_frames = 64;   // T'_max
  std::size_t cross_layers = 3;
  std::size_t cross_ffn = 1024;
  bool spatial = true;
  bool temporal = true;
  bool positional = true;
  bool temporal_first = false;
  bool aligned_injection = true;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

// Step sizes the model is conditioned on: 0 or 2^-k for k = 0..kMaxStepLog2.
inline constexpr std::size_t kMaxStepLog2 = 7;
bool valid_step_size(double d);
// 0 for d = 0, k + 1 for d = 2^-k. Throws std::invalid_argument otherwise.
std::size_t step_index(double d);

// Row permutations between the frame-major token order (b, frame, region)
// and the region-major order (b, region, frame). They are mutual inverses.
std::vector<std::size_t> frame_to_region_major(std::size_t batch, std::size_t frames, std::size_t regions);
std::vector<std::size_t> region_to_frame_major(std::size_t batch, std::size_t frames, std::size_t regions);

struct AttentionBlock {
  LayerNorm norm_spatial, norm_temporal, norm_ffn;
  MultiHeadAttention spatial, temporal;
  FeedForward ffn;
  Tensor spatial_bias;   // {heads, n, n}
  Tensor temporal_bias;  // {heads, 2 * max_frames - 1}, indexed by i - j
};

/// Spatial-temporal attention network over region-token grids.
///
/// Inputs are latent grids with rows ordered (sample, frame, region), one
/// step value per sample.
class Generator {
 public:
  Generator() = default;
  explicit Generator(const GeneratorConfig& config);

  const GeneratorConfig& config() const { return config_; }

  Tensor forward(const Tensor& x, std::size_t batch, std::size_t frames, std::span<const double> t,
                 std::span<const double> d, const SpeechCondition& cond) const;

  // Input projection plus positional tables and step embedding.
  Tensor embed_tokens(const Tensor& x, std::size_t batch, std::size_t frames, std::span<const double> t,
                      std::span<const double> d) const;
  Tensor step_embedding(std::span<const double> t, std::span<const double> d) const;  // batch x d_model
  Tensor spatial_attention(std::size_t block, const Tensor& h, std::size_t batch, std::size_t frames) const;
  Tensor temporal_attention(std::size_t block, const Tensor& h, std::size_t batch, std::size_t frames) const;
  // Fusion stack followed by the attention blocks.
  Tensor trunk(const Tensor& h, std::size_t batch, std::size_t frames, const SpeechCondition& cond) const;

  SpeechEncoder& speech() { return speech_; }
  const SpeechEncoder& speech() const { return speech_; }
  const FusionStack& fusion() const { return fusion_; }
  std::vector<AttentionBlock>& blocks() { return blocks_; }
  const std::vector<AttentionBlock>& blocks() const { return blocks_; }

  ParamList parameters() const;
  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);

 private:
  void check_inputs(const Tensor& x, std::size_t batch, std::size_t frames, std::span<const double> t,
                    std::span<const double> d) const;

  GeneratorConfig config_;
  SpeechEncoder speech_;
  FusionStack fusion_;
  Tensor in_weight_, in_bias_;    // {n, d_latent, d_model}, {n, d_model}
  Tensor out_weight_, out_bias_;  // {n, d_model, d_latent}, {n, d_latent}
  LayerNorm out_norm_;
  Tensor spatial_table_, temporal_table_;
  Tensor step_table_;             // {kMaxStepLog2 + 2, step_embed / 2}
  Linear step_in_, step_out_;
  std::vector<AttentionBlock> blocks_;
};

}  // namespace glsm
